//! Glue between simulated volumes, the bridge trainer and whole-volume
//! correction: calcium-centered crops, window extraction, the training loop
//! and tiled 2.5D inference.

use rand::Rng;
use rayon::prelude::*;

use crate::bridge::{
    sliding_window_correct, train_step, BridgeSchedule, Denoiser, LossBreakdown, SampleMode,
    TrainState, TrainableDenoiser, TrainingExample,
};
use crate::error::{Error, Result};
use crate::grid::{
    denormalize, extract_rois, normalize, window_at, BinaryMask, RoiParams, VoxelGrid,
};
use crate::rng::{fnv1a64, rng_for};

/// Clean volume, its motion-corrupted reconstruction and the calcium mask.
#[derive(Clone, Debug)]
pub struct VolumePair {
    pub clean: VoxelGrid,
    pub corrupt: VoxelGrid,
    pub mask: BinaryMask,
}

/// Matching clean/corrupt sub-blocks cut at the same origin.
#[derive(Clone, Debug)]
pub struct CropPair {
    pub origin: [usize; 3],
    pub clean: VoxelGrid,
    pub corrupt: VoxelGrid,
}

impl VolumePair {
    pub fn new(clean: VoxelGrid, corrupt: VoxelGrid, mask: BinaryMask) -> Result<Self> {
        if !clean.same_geometry(&corrupt) || clean.dims() != mask.dims() {
            return Err(Error::invalid("clean, corrupt and mask geometry differ"));
        }
        Ok(Self {
            clean,
            corrupt,
            mask,
        })
    }

    /// One calcium-centered block per mask component (see [`extract_rois`]),
    /// with background blocks appended when requested.
    pub fn crops<R: Rng>(&self, params: &RoiParams, rng: &mut R) -> Result<Vec<CropPair>> {
        extract_rois(&self.clean, &self.mask, params, rng)?
            .into_iter()
            .map(|roi| {
                Ok(CropPair {
                    origin: roi.origin,
                    corrupt: self.corrupt.crop(roi.origin, params.block)?,
                    clean: roi.volume,
                })
            })
            .collect()
    }
}

/// Every stride-1 `k`-slice window of a crop pair as a normalized training example.
pub fn crop_windows(crop: &CropPair, k: usize) -> Result<Vec<TrainingExample>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "window depth k must be odd, got {k}"
        )));
    }
    let dims = crop.clean.dims();
    let x0 = normalize(&crop.clean);
    let y = normalize(&crop.corrupt);
    let vv = crop.clean.voxel_volume();
    Ok((0..dims[2])
        .map(|z| TrainingExample {
            x0: window_at(x0.values(), dims, z, k),
            y: window_at(y.values(), dims, z, k),
            voxel_volume: vv,
        })
        .collect())
}

/// Runs `steps` optimizer steps with batches drawn uniformly (with
/// replacement) from `examples`. `on_step` sees the 1-based step and its loss.
pub fn fit<D: TrainableDenoiser>(
    state: &mut TrainState<D>,
    examples: &[TrainingExample],
    steps: u64,
    seed: u64,
    mut on_step: impl FnMut(u64, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut rng = rng_for(seed, fnv1a64("fit"));
    let bs = state.cfg.batch_size;
    for _ in 0..steps {
        let batch: Vec<TrainingExample> = (0..bs)
            .map(|_| examples[rng.random_range(0..examples.len())].clone())
            .collect();
        let loss = train_step(state, &batch, &mut rng)?;
        on_step(state.step, &loss)?;
    }
    Ok(())
}

fn tile_origins(n: usize, tile: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).step_by(tile).map(|o| o.min(n - tile)).collect();
    v.dedup();
    v
}

/// Tiles the volume in-plane into `tile = [w, h]` blocks spanning all slices,
/// corrects each with the 2.5D sampler and pastes the result back. Trailing
/// tiles are shifted inward so they fit; overlaps take the later tile.
pub fn correct_volume(
    v: &VoxelGrid,
    denoiser: &dyn Denoiser,
    sched: &BridgeSchedule,
    mode: SampleMode,
    k: usize,
    tile: [usize; 2],
) -> Result<VoxelGrid> {
    let [nx, ny, nz] = v.dims();
    let [tw, th] = tile;
    if tw == 0 || th == 0 || tw > nx || th > ny {
        return Err(Error::invalid(format!(
            "tile {tile:?} does not fit volume {:?}",
            v.dims()
        )));
    }
    let origins: Vec<[usize; 3]> = tile_origins(ny, th)
        .into_iter()
        .flat_map(|oy| tile_origins(nx, tw).into_iter().map(move |ox| [ox, oy, 0]))
        .collect();
    let tiles: Vec<VoxelGrid> = origins
        .par_iter()
        .map(|&o| {
            let block = v.crop(o, [tw, th, nz])?;
            let out = sliding_window_correct(&normalize(&block), denoiser, sched, mode, k)?;
            Ok(denormalize(&out))
        })
        .collect::<Result<_>>()?;
    let mut out = v.clone();
    for (o, t) in origins.iter().zip(&tiles) {
        for z in 0..nz {
            for y in 0..th {
                for x in 0..tw {
                    out.set(o[0] + x, o[1] + y, z, t.get(x, y, z));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{CnnConfig, IdentityDenoiser, TinyDenoiser, TrainConfig};
    use crate::grid::{denormalize_unit, normalize_hu};
    use crate::simulate::{make_phantom, PhantomSpec};

    #[test]
    fn tiles_cover_the_plane() {
        assert_eq!(tile_origins(64, 32), vec![0, 32]);
        assert_eq!(tile_origins(40, 32), vec![0, 8]);
        assert_eq!(tile_origins(32, 32), vec![0]);
    }

    #[test]
    fn identity_correction_returns_the_clipped_input() {
        let (v, _) = make_phantom(&PhantomSpec::default(), 3).unwrap();
        let sched = BridgeSchedule::new(1000, 100).unwrap();
        let out = correct_volume(
            &v,
            &IdentityDenoiser,
            &sched,
            SampleMode::Posterior,
            3,
            [40, 24],
        )
        .unwrap();
        for (a, b) in v.values().iter().zip(out.values()) {
            assert!((denormalize_unit(normalize_hu(*a)) - b).abs() < 1e-9);
        }
    }

    #[test]
    fn windows_and_fit() {
        let (v, m) = make_phantom(&PhantomSpec::default(), 5).unwrap();
        let pair = VolumePair::new(v.clone(), v, m).unwrap();
        let params = RoiParams {
            block: [16, 16, 8],
            jitter: 2,
            background_blocks: 1,
        };
        let crops = pair.crops(&params, &mut rng_for(1, 0xc0)).unwrap();
        assert!(crops.len() >= 2);
        let ex: Vec<_> = crops
            .iter()
            .flat_map(|c| crop_windows(c, 3).unwrap())
            .collect();
        assert_eq!(ex.len(), crops.len() * 8);
        let net = TinyDenoiser::new(CnnConfig {
            width: 4,
            dilations: vec![1],
            ..CnnConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(net, cfg).unwrap();
        let mut seen = Vec::new();
        fit(&mut state, &ex, 3, 7, |s, l| {
            seen.push((s, l.total));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}
