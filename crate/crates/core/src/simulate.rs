//! Motion-corrupted volume synthesis, procedural phantoms and paired datasets.
//!
//! Projection runs on attenuation-like values `HU + 1000` so air is zero and
//! the grid border carries no artificial edge; results are shifted back to HU.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inpaint, BinaryMask, CalciumLayer, Dims, Spacing, VoxelGrid};
use crate::motion::{find_preset, generate, preset_catalog, MotionProfileSpec, Trajectory};
use crate::rng::{derive_seed, fnv1a64, rng_for};
use crate::tomo::{
    detector_bins, fbp, project_into, AngleSet, FbpOptions, RampWindow, Sinogram,
    ALLOWED_ANGLE_COUNTS,
};
use crate::volume_io::{write_mask, write_volume, Unit};

pub const AIR_HU: f64 = -1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionSource {
    Preset(String),
    Explicit(MotionProfileSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub motion: MotionSource,
    pub n_angles: usize,
    pub seed: u64,
    /// Replaces the sampled amplitude (0 disables motion).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude_override: Option<f64>,
    /// Also pass the clean volume through projection and reconstruction.
    #[serde(default)]
    pub reconstruct_clean: bool,
    #[serde(default)]
    pub hann_window: bool,
}

impl SimConfig {
    pub fn preset(name: &str, n_angles: usize, seed: u64) -> Self {
        Self {
            motion: MotionSource::Preset(name.into()),
            n_angles,
            seed,
            amplitude_override: None,
            reconstruct_clean: false,
            hann_window: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_ANGLE_COUNTS.contains(&self.n_angles) {
            return Err(Error::invalid(format!(
                "N = {} is not one of {:?}",
                self.n_angles, ALLOWED_ANGLE_COUNTS
            )));
        }
        if let Some(a) = self.amplitude_override {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::invalid(format!(
                    "amplitude override must be >= 0, got {a}"
                )));
            }
        }
        if let MotionSource::Preset(name) = &self.motion {
            find_preset(name)?;
        }
        Ok(())
    }

    /// The concrete motion parameters this config resolves to.
    pub fn resolve_spec(&self) -> Result<MotionProfileSpec> {
        self.validate()?;
        let spec = match &self.motion {
            MotionSource::Preset(name) => find_preset(name)?.sample(self.seed),
            MotionSource::Explicit(s) => s.clone(),
        };
        Ok(match self.amplitude_override {
            Some(a) => spec.with_amplitude(a),
            None => spec,
        })
    }

    fn fbp_options(&self) -> FbpOptions {
        FbpOptions {
            window: if self.hann_window {
                RampWindow::Hann
            } else {
                RampWindow::RamLak
            },
            outside_value: AIR_HU,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairedSample {
    pub x0: VoxelGrid,
    pub y: VoxelGrid,
    pub mask: BinaryMask,
    pub config: SimConfig,
    pub spec: MotionProfileSpec,
    pub trajectory: Trajectory,
}

/// Output of the angle-wise pipeline before pairing.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub volume: VoxelGrid,
    /// One sinogram per axial slice.
    pub sinograms: Vec<Sinogram>,
}

/// Displacements converted to voxel units: the axial component is given in
/// in-plane pixels and rescaled by the spacing ratio.
pub fn trajectory_in_voxels(t: &Trajectory, spacing: Spacing) -> Vec<[f64; 3]> {
    let zr = spacing[0] / spacing[2];
    t.displacements
        .iter()
        .map(|d| [d[0], d[1] * spacing[0] / spacing[1], d[2] * zr])
        .collect()
}

fn check_square(v: &VoxelGrid) -> Result<usize> {
    let [nx, ny, _] = v.dims();
    let [sx, sy, _] = v.spacing();
    if nx != ny || (sx - sy).abs() > 1e-9 * sx {
        return Err(Error::invalid(format!(
            "slices must be square with isotropic in-plane spacing, got {nx}x{ny} at {sx}x{sy} mm"
        )));
    }
    Ok(nx)
}

fn to_attenuation(slice: &[f64]) -> Vec<f64> {
    slice.iter().map(|v| v - AIR_HU).collect()
}

fn reconstruct(
    sinograms: &[Sinogram],
    angles: &AngleSet,
    like: &VoxelGrid,
    opts: &FbpOptions,
) -> Result<VoxelGrid> {
    let n = like.dims()[0];
    let slices: Vec<Vec<f64>> = sinograms
        .par_iter()
        .map(|s| {
            let mut img = fbp(s, angles, n, opts)?;
            for v in &mut img {
                if *v != opts.outside_value {
                    *v += AIR_HU;
                }
            }
            Ok(img)
        })
        .collect::<Result<_>>()?;
    VoxelGrid::new(like.dims(), like.spacing(), slices.concat())
}

/// Projection and reconstruction of a static volume.
pub fn static_reconstruction(
    x: &VoxelGrid,
    n_angles: usize,
    window: RampWindow,
) -> Result<VoxelGrid> {
    let n = check_square(x)?;
    if !x.is_finite() {
        return Err(Error::Numeric("volume has non-finite values".into()));
    }
    let angles = AngleSet::uniform(n_angles)?;
    let sx = x.spacing()[0];
    let sinograms: Vec<Sinogram> = (0..x.dims()[2])
        .into_par_iter()
        .map(|z| {
            let att = to_attenuation(x.slice(z));
            let mut s = Sinogram::zeros(n_angles, detector_bins(n), sx);
            for (i, &a) in angles.degrees().iter().enumerate() {
                project_into(&att, n, sx, a, s.row_mut(i));
            }
            s
        })
        .collect();
    let opts = FbpOptions {
        window,
        outside_value: AIR_HU,
    };
    reconstruct(&sinograms, &angles, x, &opts)
}

/// The angle-wise pipeline for a given trajectory (pixels, one entry per angle).
pub fn simulate_trajectory(
    x0: &VoxelGrid,
    m: &BinaryMask,
    trajectory: &Trajectory,
    opts: &FbpOptions,
) -> Result<Simulation> {
    let n = check_square(x0)?;
    if x0.dims() != m.dims() {
        return Err(Error::invalid("volume and mask dims differ"));
    }
    if m.is_empty() {
        return Err(Error::invalid("calcium mask is empty"));
    }
    if !x0.is_finite() {
        return Err(Error::Numeric("volume has non-finite values".into()));
    }
    let n_angles = trajectory.len();
    let angles = AngleSet::uniform(n_angles)?;
    let background = inpaint(x0, m)?;
    let layer = CalciumLayer::new(x0, m)?.expect("mask is nonempty");
    let shifts = trajectory_in_voxels(trajectory, x0.spacing());
    let [_, _, nz] = x0.dims();
    let bins = detector_bins(n);
    let sx = x0.spacing()[0];

    // rows[i] holds the projections of every slice at angle i.
    let rows: Vec<Vec<f64>> = (0..n_angles)
        .into_par_iter()
        .map_init(
            || background.clone(),
            |xi, i| {
                xi.values_mut().copy_from_slice(background.values());
                layer.composite_into(shifts[i], xi);
                let theta = angles.degrees()[i];
                let mut out = vec![0.0; nz * bins];
                for z in 0..nz {
                    let att = to_attenuation(xi.slice(z));
                    project_into(&att, n, sx, theta, &mut out[z * bins..(z + 1) * bins]);
                }
                out
            },
        )
        .collect();

    let mut sinograms = vec![Sinogram::zeros(n_angles, bins, sx); nz];
    for (i, row) in rows.iter().enumerate() {
        for (z, s) in sinograms.iter_mut().enumerate() {
            s.row_mut(i).copy_from_slice(&row[z * bins..(z + 1) * bins]);
        }
    }
    let volume = reconstruct(&sinograms, &angles, x0, opts)?;
    if !volume.is_finite() {
        return Err(Error::Numeric(
            "reconstruction produced non-finite values".into(),
        ));
    }
    Ok(Simulation { volume, sinograms })
}

/// Full simulation from a config: resolve motion, build the trajectory,
/// project angle by angle and reconstruct.
pub fn simulate_motion(x0: &VoxelGrid, m: &BinaryMask, cfg: &SimConfig) -> Result<PairedSample> {
    Ok(simulate_motion_full(x0, m, cfg)?.0)
}

/// [`simulate_motion`] that also returns the per-slice sinograms.
pub fn simulate_motion_full(
    x0: &VoxelGrid,
    m: &BinaryMask,
    cfg: &SimConfig,
) -> Result<(PairedSample, Vec<Sinogram>)> {
    let spec = cfg.resolve_spec()?;
    let trajectory = generate(&spec, cfg.n_angles)?;
    let sim = simulate_trajectory(x0, m, &trajectory, &cfg.fbp_options())?;
    let x0_out = if cfg.reconstruct_clean {
        static_reconstruction(x0, cfg.n_angles, cfg.fbp_options().window)?
    } else {
        x0.clone()
    };
    Ok((
        PairedSample {
            x0: x0_out,
            y: sim.volume,
            mask: m.clone(),
            config: cfg.clone(),
            spec,
            trajectory,
        },
        sim.sinograms,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    /// Inclusive range for the number of lesions (1 to 4).
    pub lesion_count: [usize; 2],
    /// In-plane lesion radius range (voxels).
    pub radius_vox: [f64; 2],
    /// Axial lesion radius range (slices).
    pub axial_radius_vox: [f64; 2],
    pub peak_hu: [f64; 2],
    pub body_hu: f64,
    pub lung_hu: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 16],
            spacing: [0.75, 0.75, 3.0],
            lesion_count: [1, 3],
            radius_vox: [1.5, 3.5],
            axial_radius_vox: [0.8, 1.8],
            peak_hu: [250.0, 900.0],
            body_hu: 40.0,
            lung_hu: -800.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        if nx < 16 || ny < 16 || nz == 0 {
            return Err(Error::invalid(format!(
                "phantom dims {:?} too small (need >= 16x16x1)",
                self.dims
            )));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("phantom spacing must be positive"));
        }
        let [lo, hi] = self.lesion_count;
        if lo < 1 || hi > 4 || lo > hi {
            return Err(Error::invalid("lesion count must lie within 1..=4"));
        }
        let ranges = [self.radius_vox, self.axial_radius_vox, self.peak_hu];
        if ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1])) {
            return Err(Error::invalid(
                "phantom ranges must be positive and ordered",
            ));
        }
        if self.peak_hu[0] < 130.0 || self.peak_hu[1] > 1000.0 {
            return Err(Error::invalid("lesion peak HU must lie within [130, 1000]"));
        }
        if self.body_hu >= 130.0 || self.lung_hu >= self.body_hu {
            return Err(Error::invalid(
                "body HU must be below 130 and above lung HU",
            ));
        }
        Ok(())
    }
}

/// Logistic edge of width about one voxel: 1 inside (`r < 1`), 0 outside.
fn smooth_inside(r: f64, scale_px: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) * scale_px / 0.6).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedLesion {
    pub center: [usize; 3],
    pub radii: [f64; 3],
    pub peak_hu: f64,
}

/// Deterministic cardiac-slice-like phantom and its calcium mask.
pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<(VoxelGrid, BinaryMask)> {
    Ok(make_phantom_detailed(spec, seed)?.0)
}

pub fn make_phantom_detailed(
    spec: &PhantomSpec,
    seed: u64,
) -> Result<((VoxelGrid, BinaryMask), Vec<PlacedLesion>)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let mut rng = rng_for(seed, fnv1a64("phantom"));
    let n = nx.min(ny) as f64;
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);

    let body = [
        0.42 * n * rng.random_range(0.95..1.0),
        0.34 * n * rng.random_range(0.95..1.0),
    ];
    let lung = [0.12 * n, 0.2 * n];
    let lung_dx = 0.21 * n;
    let heart = [0.13 * n, 0.15 * n];
    let heart_hu = spec.body_hu + 15.0;

    let mut base = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let rb = ((dx / body[0]).powi(2) + (dy / body[1]).powi(2)).sqrt();
            let mut v = AIR_HU + (spec.body_hu - AIR_HU) * smooth_inside(rb, body[0].min(body[1]));
            for side in [-1.0, 1.0] {
                let rl =
                    (((dx - side * lung_dx) / lung[0]).powi(2) + (dy / lung[1]).powi(2)).sqrt();
                v += (spec.lung_hu - spec.body_hu) * smooth_inside(rl, lung[0]);
            }
            let rh = ((dx / heart[0]).powi(2) + (dy / heart[1]).powi(2)).sqrt();
            v += (heart_hu - spec.body_hu) * smooth_inside(rh, heart[0]);
            base[y * nx + x] = v;
        }
    }
    let mut values = Vec::with_capacity(nx * ny * nz);
    for _ in 0..nz {
        values.extend_from_slice(&base);
    }
    let mut vol = VoxelGrid::new(spec.dims, spec.spacing, values)?;

    let count = rng.random_range(spec.lesion_count[0]..=spec.lesion_count[1]);
    let mut placed: Vec<PlacedLesion> = Vec::new();
    let region = 0.15 * n;
    let mut tries = 0;
    while placed.len() < count {
        tries += 1;
        if tries > 500 {
            return Err(Error::invalid(format!(
                "could not place {count} disjoint lesions in a {:?} phantom",
                spec.dims
            )));
        }
        let r = rng.random_range(spec.radius_vox[0]..=spec.radius_vox[1]);
        let rz = rng.random_range(spec.axial_radius_vox[0]..=spec.axial_radius_vox[1]);
        let radii = [
            r * rng.random_range(0.8..1.2),
            r * rng.random_range(0.8..1.2),
            rz,
        ];
        let peak_hu = rng.random_range(spec.peak_hu[0]..=spec.peak_hu[1]);
        let ox = (cx + rng.random_range(-region..region)).round();
        let oy = (cy + rng.random_range(-region..region)).round();
        let zmargin = rz.ceil().min((nz as f64 - 1.0) / 2.0);
        let oz = if nz == 1 {
            0.0
        } else {
            rng.random_range(zmargin..=(nz as f64 - 1.0 - zmargin))
                .round()
        };
        let center = [ox as usize, oy as usize, oz as usize];
        let cand = PlacedLesion {
            center,
            radii,
            peak_hu,
        };
        // Disjoint supports with at least one voxel of clearance.
        let clear = placed.iter().all(|p| {
            (0..3).any(|a| {
                let gap = (p.center[a] as f64 - cand.center[a] as f64).abs();
                gap > (p.radii[a] + cand.radii[a]).ceil() + 1.0
            })
        });
        if clear {
            placed.push(cand);
        }
    }

    let mut mask = BinaryMask::empty(spec.dims)?;
    for l in &placed {
        paint_lesion(&mut vol, &mut mask, l);
    }
    Ok(((vol, mask), placed))
}

/// Gaussian-profile ellipsoid: peak at the (voxel-centered) core, falling to
/// `exp(-2)` of its contrast at the support boundary.
fn paint_lesion(vol: &mut VoxelGrid, mask: &mut BinaryMask, l: &PlacedLesion) {
    let [nx, ny, nz] = vol.dims();
    let lo = |a: usize| (l.center[a] as f64 - l.radii[a]).floor().max(0.0) as usize;
    let hi = |a: usize, n: usize| ((l.center[a] as f64 + l.radii[a]).ceil() as usize).min(n - 1);
    for z in lo(2)..=hi(2, nz) {
        for y in lo(1)..=hi(1, ny) {
            for x in lo(0)..=hi(0, nx) {
                let p = [x, y, z];
                let r2: f64 = (0..3)
                    .map(|a| ((p[a] as f64 - l.center[a] as f64) / l.radii[a]).powi(2))
                    .sum();
                if r2 > 1.0 {
                    continue;
                }
                let bg = vol.get(x, y, z);
                let v = bg + (l.peak_hu - bg) * (-2.0 * r2).exp();
                vol.set(x, y, z, v.max(bg));
                if v >= 130.0 {
                    mask.set(x, y, z, true);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub clean_path: PathBuf,
    pub corrupt_path: PathBuf,
    pub mask_path: PathBuf,
    pub preset: String,
    #[serde(rename = "N")]
    pub n_angles: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_cases: usize,
    pub phantom: PhantomSpec,
    /// Preset names; empty means the full catalog.
    pub presets: Vec<String>,
    /// Fixed N for every pair, or `None` to draw from the allowed set.
    pub n_angles: Option<usize>,
    pub seed: u64,
    pub train_fraction: f64,
    pub reconstruct_clean: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_cases: 10,
            phantom: PhantomSpec::default(),
            presets: Vec::new(),
            n_angles: None,
            seed: 0,
            train_fraction: 0.8,
            reconstruct_clean: false,
        }
    }
}

impl DatasetConfig {
    pub fn preset_names(&self) -> Vec<String> {
        if self.presets.is_empty() {
            preset_catalog()
                .presets
                .iter()
                .map(|p| p.name.clone())
                .collect()
        } else {
            self.presets.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::invalid("n_cases must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::invalid("train fraction must lie in [0, 1]"));
        }
        if let Some(n) = self.n_angles {
            if !ALLOWED_ANGLE_COUNTS.contains(&n) {
                return Err(Error::invalid(format!(
                    "N = {n} is not one of {ALLOWED_ANGLE_COUNTS:?}"
                )));
            }
        }
        for p in self.preset_names() {
            find_preset(&p)?;
        }
        self.phantom.validate()
    }

    pub fn case_seed(&self, case: usize) -> u64 {
        derive_seed(self.seed, case as u64)
    }
}

/// Case ids assigned to the train split (the rest are test): a seeded shuffle
/// cut at `round(fraction · n)`.
pub fn split_cases(n_cases: usize, fraction: f64, seed: u64) -> BTreeMap<usize, Split> {
    let mut ids: Vec<usize> = (0..n_cases).collect();
    ids.shuffle(&mut rng_for(seed, fnv1a64("split")));
    let n_train = (fraction * n_cases as f64).round() as usize;
    ids.iter()
        .enumerate()
        .map(|(k, &id)| {
            (
                id,
                if k < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
            )
        })
        .collect()
}

pub fn case_name(case: usize) -> String {
    format!("case_{case:04}")
}

/// Simulates every (case, preset) pair, writes volumes under `out_dir` and
/// returns manifest entries with paths relative to `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let presets = cfg.preset_names();
    let splits = split_cases(cfg.n_cases, cfg.train_fraction, cfg.seed);

    let cases: Vec<(VoxelGrid, BinaryMask)> = (0..cfg.n_cases)
        .into_par_iter()
        .map(|c| make_phantom(&cfg.phantom, cfg.case_seed(c)))
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for c in 0..cfg.n_cases {
        for p in &presets {
            jobs.push((c, p.clone()));
        }
    }
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|(c, preset)| {
            let (x0, m) = &cases[*c];
            let seed = derive_seed(cfg.case_seed(*c), fnv1a64(preset));
            let n_angles = match cfg.n_angles {
                Some(n) => n,
                None => {
                    ALLOWED_ANGLE_COUNTS[rng_for(seed, fnv1a64("angles"))
                        .random_range(0..ALLOWED_ANGLE_COUNTS.len())]
                }
            };
            let mut sim = SimConfig::preset(preset, n_angles, seed);
            sim.reconstruct_clean = cfg.reconstruct_clean;
            let pair = simulate_motion(x0, m, &sim)?;
            let case_id = case_name(*c);
            let corrupt_path = PathBuf::from(&case_id).join(format!("corrupt_{preset}.raw"));
            write_volume(&out_dir.join(&corrupt_path), &pair.y, Unit::Hu)?;
            let clean_path = if cfg.reconstruct_clean {
                let p = PathBuf::from(&case_id).join(format!("clean_{preset}.raw"));
                write_volume(&out_dir.join(&p), &pair.x0, Unit::Hu)?;
                p
            } else {
                PathBuf::from(&case_id).join("clean.raw")
            };
            Ok(ManifestEntry {
                case_id,
                clean_path,
                corrupt_path,
                mask_path: PathBuf::from(case_name(*c)).join("mask.raw"),
                preset: preset.clone(),
                n_angles,
                seed,
                split: splits[c].clone(),
            })
        })
        .collect::<Result<_>>()?;

    for (c, (x0, m)) in cases.iter().enumerate() {
        let dir = out_dir.join(case_name(c));
        if !cfg.reconstruct_clean {
            write_volume(&dir.join("clean.raw"), x0, Unit::Hu)?;
        }
        write_mask(&dir.join("mask.raw"), m, x0.spacing())?;
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a manifest and checks that every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let root = path.parent().unwrap_or(Path::new(""));
    for e in &entries {
        for p in [&e.clean_path, &e.corrupt_path, &e.mask_path] {
            let full = root.join(p);
            if !full.exists() {
                return Err(Error::format(
                    path,
                    format!("referenced file {} is missing", full.display()),
                ));
            }
        }
    }
    Ok(entries)
}
