//! Volumetric data model: HU volumes, binary calcium masks, the [0, 1]
//! intensity normalization, ROI and 2.5D window extraction, sub-voxel
//! region shifting and inpainting.
//!
//! Voxel storage order is x fastest, then y, then z, so every axial slice is
//! one contiguous run of `nx * ny` values.

use rand::Rng;

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

/// Lower bound of the HU clipping window.
pub const HU_MIN: f64 = -200.0;
/// Upper bound of the HU clipping window.
pub const HU_MAX: f64 = 800.0;
const HU_RANGE: f64 = HU_MAX - HU_MIN;

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "spacing must be finite and > 0, got {spacing:?}"
        )));
    }
    Ok(())
}

#[inline]
fn flat(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

fn unflat(dims: Dims, i: usize) -> [usize; 3] {
    let plane = dims[0] * dims[1];
    let z = i / plane;
    let r = i % plane;
    [r % dims[0], r / dims[0], z]
}

/// 3D scalar field in Hounsfield units with physical voxel spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    spacing: Spacing,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(dims: Dims, spacing: Spacing, values: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} values for dims {dims:?}, got {}",
                values.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            values,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Result<Self> {
        check_geometry(dims, spacing)?;
        Ok(Self {
            dims,
            spacing,
            values: vec![value; dims[0] * dims[1] * dims[2]],
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        flat(self.dims, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.values[i] = v;
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let plane = self.dims[0] * self.dims[1];
        &self.values[z * plane..(z + 1) * plane]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f64] {
        let plane = self.dims[0] * self.dims[1];
        &mut self.values[z * plane..(z + 1) * plane]
    }

    pub fn same_geometry(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copies the block `[origin, origin + size)`.
    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<VoxelGrid> {
        check_block(self.dims, origin, size)?;
        let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let start = self.index(origin[0], y, z);
                out.extend_from_slice(&self.values[start..start + size[0]]);
            }
        }
        VoxelGrid::new(size, self.spacing, out)
    }
}

fn check_block(dims: Dims, origin: [usize; 3], size: Dims) -> Result<()> {
    for a in 0..3 {
        if size[a] == 0 || origin[a] + size[a] > dims[a] {
            return Err(Error::invalid(format!(
                "block origin {origin:?} size {size:?} exceeds dims {dims:?}"
            )));
        }
    }
    Ok(())
}

/// One boolean per voxel; same layout as [`VoxelGrid`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if bits.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::invalid(format!(
                "mask length {} does not match dims {dims:?}",
                bits.len()
            )));
        }
        Ok(Self { dims, bits })
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![false; dims[0] * dims[1] * dims[2]])
    }

    /// Voxels with value >= `threshold`.
    pub fn threshold(v: &VoxelGrid, threshold: f64) -> Self {
        Self {
            dims: v.dims,
            bits: v.values.iter().map(|&x| x >= threshold).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[flat(self.dims, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = flat(self.dims, x, y, z);
        self.bits[i] = v;
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<BinaryMask> {
        check_block(self.dims, origin, size)?;
        let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let start = flat(self.dims, origin[0], y, z);
                out.extend_from_slice(&self.bits[start..start + size[0]]);
            }
        }
        BinaryMask::new(size, out)
    }

    /// Inclusive bounding box `(min, max)` of the true voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let p = unflat(self.dims, i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            any = true;
        }
        any.then_some((lo, hi))
    }
}

/// HU volume after clipping to [-200, 800] and mapping affinely onto [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGrid {
    dims: Dims,
    spacing: Spacing,
    values: Vec<f64>,
}

impl NormalizedGrid {
    pub fn new(dims: Dims, spacing: Spacing, values: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::invalid(format!(
                "expected {} values for dims {dims:?}, got {}",
                dims[0] * dims[1] * dims[2],
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!(
                "normalized value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            values,
        })
    }

    /// Builds a grid after clamping every value into [0, 1]; NaN maps to 0.
    pub fn from_clamped(dims: Dims, spacing: Spacing, mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(dims, spacing, values)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let plane = self.dims[0] * self.dims[1];
        &self.values[z * plane..(z + 1) * plane]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }
}

#[inline]
pub fn normalize_hu(x: f64) -> f64 {
    (x.clamp(HU_MIN, HU_MAX) - HU_MIN) / HU_RANGE
}

/// Inverse of the normalization on [0, 1]; affine with slope 1000.
#[inline]
pub fn denormalize_unit(n: f64) -> f64 {
    HU_RANGE * n + HU_MIN
}

/// d(HU)/d(normalized value).
pub const DENORMALIZE_SLOPE: f64 = HU_RANGE;

pub fn normalize(v: &VoxelGrid) -> NormalizedGrid {
    NormalizedGrid {
        dims: v.dims,
        spacing: v.spacing,
        values: v.values.iter().map(|&x| normalize_hu(x)).collect(),
    }
}

pub fn denormalize(n: &NormalizedGrid) -> VoxelGrid {
    VoxelGrid {
        dims: n.dims,
        spacing: n.spacing,
        values: n.values.iter().map(|&x| denormalize_unit(x)).collect(),
    }
}

/// Denormalizes raw values, rejecting anything outside [0, 1].
pub fn denormalize_values(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&x| {
            if (0.0..=1.0).contains(&x) {
                Ok(denormalize_unit(x))
            } else {
                Err(Error::Domain(format!(
                    "normalized value {x} outside [0, 1]"
                )))
            }
        })
        .collect()
}

/// Dense `k × h × w` block, slice-major (`[k][h][w]`), w fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn zeros(k: usize, h: usize, w: usize) -> Self {
        Self {
            k,
            h,
            w,
            data: vec![0.0; k * h * w],
        }
    }

    pub fn from_vec(k: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * h * w {
            return Err(Error::invalid(format!(
                "patch data length {} != {k}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { k, h, w, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.k, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn slice(&self, s: usize) -> &[f64] {
        let p = self.plane();
        &self.data[s * p..(s + 1) * p]
    }

    /// The middle slice (index `k / 2`).
    pub fn central_slice(&self) -> &[f64] {
        self.slice(self.k / 2)
    }

    pub fn same_shape(&self, other: &Patch) -> bool {
        self.shape() == other.shape()
    }

    pub fn zip_map(&self, other: &Patch, f: impl Fn(f64, f64) -> f64) -> Patch {
        debug_assert!(self.same_shape(other));
        Patch {
            k: self.k,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Patch {
        Patch {
            k: self.k,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn rms_diff(&self, other: &Patch) -> f64 {
        rms_diff(&self.data, &other.data)
    }
}

pub fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// A `(h, w, k)` sub-block of a normalized volume centered on axial slice `center`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub center: usize,
    pub patch: Patch,
}

/// Extracts one window per `stride` axial steps. Slices beyond either z edge
/// are clamped (replication padding). In-plane extent must equal the grid's.
pub fn extract_context_windows(
    v: &NormalizedGrid,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Result<Vec<ContextWindow>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "window depth k must be odd, got {k}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let [nx, ny, nz] = v.dims;
    if h != ny || w != nx {
        return Err(Error::invalid(format!(
            "window in-plane extent ({h}, {w}) does not match volume ({ny}, {nx})"
        )));
    }
    Ok((0..nz)
        .step_by(stride)
        .map(|center| ContextWindow {
            center,
            patch: window_at(&v.values, [nx, ny, nz], center, k),
        })
        .collect())
}

/// Builds the `k`-slice window around `center` from a slice-major buffer.
pub fn window_at(values: &[f64], dims: Dims, center: usize, k: usize) -> Patch {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let half = (k / 2) as isize;
    let mut data = Vec::with_capacity(k * plane);
    for off in -half..=half {
        let z = (center as isize + off).clamp(0, nz as isize - 1) as usize;
        data.extend_from_slice(&values[z * plane..(z + 1) * plane]);
    }
    Patch {
        k,
        h: ny,
        w: nx,
        data,
    }
}

/// Reassembles a volume from the central slices of stride-1 windows.
pub fn stack_central_slices(
    slices: &[Vec<f64>],
    dims: Dims,
    spacing: Spacing,
) -> Result<NormalizedGrid> {
    let plane = dims[0] * dims[1];
    if slices.len() != dims[2] || slices.iter().any(|s| s.len() != plane) {
        return Err(Error::invalid("slice stack does not match target dims"));
    }
    NormalizedGrid::from_clamped(dims, spacing, slices.concat())
}

/// Voxel connectivity for 3D component labeling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Face6,
    Full26,
}

/// Connected components of a 3D mask as lists of flat voxel indices, in
/// order of their first voxel.
pub fn connected_components(m: &BinaryMask, conn: Connectivity) -> Vec<Vec<usize>> {
    let dims = m.dims;
    let mut seen = vec![false; m.bits.len()];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..m.bits.len() {
        if !m.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let p = unflat(dims, i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let manhattan = dx.abs() + dy.abs() + dz.abs();
                        if manhattan == 0 || (conn == Connectivity::Face6 && manhattan > 1) {
                            continue;
                        }
                        let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                            continue;
                        }
                        let j = flat(dims, q[0] as usize, q[1] as usize, q[2] as usize);
                        if m.bits[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// 8-connected components of a 2D boolean image (`nx` fastest).
pub fn label_slice_8(bits: &[bool], nx: usize, ny: usize) -> Vec<Vec<usize>> {
    debug_assert_eq!(bits.len(), nx * ny);
    let mut seen = vec![false; bits.len()];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = ((i % nx) as i64, (i / nx) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (qx, qy) = (x + dx, y + dy);
                    if (dx == 0 && dy == 0)
                        || qx < 0
                        || qy < 0
                        || qx >= nx as i64
                        || qy >= ny as i64
                    {
                        continue;
                    }
                    let j = qy as usize * nx + qx as usize;
                    if bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiKind {
    Calcium,
    Background,
}

#[derive(Clone, Debug)]
pub struct Roi {
    pub origin: [usize; 3],
    pub kind: RoiKind,
    pub volume: VoxelGrid,
    pub mask: BinaryMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiParams {
    pub block: Dims,
    /// Maximum in-plane offset (voxels) applied to each calcium-centered block.
    pub jitter: usize,
    pub background_blocks: usize,
}

impl Default for RoiParams {
    fn default() -> Self {
        Self {
            block: [64, 64, 16],
            jitter: 8,
            background_blocks: 1,
        }
    }
}

fn block_origin(center: i64, block: usize, dim: usize) -> usize {
    (center - (block / 2) as i64).clamp(0, (dim - block) as i64) as usize
}

/// Calcium-centered ROI blocks (one per 26-connected mask component, center
/// jittered in-plane) followed by background-only blocks.
pub fn extract_rois<R: Rng>(
    v: &VoxelGrid,
    m: &BinaryMask,
    params: &RoiParams,
    rng: &mut R,
) -> Result<Vec<Roi>> {
    if v.dims != m.dims {
        return Err(Error::invalid("volume and mask dims differ"));
    }
    let block = params.block;
    if (0..3).any(|a| v.dims[a] < block[a]) {
        return Err(Error::invalid(format!(
            "volume {:?} is smaller than ROI block {block:?}",
            v.dims
        )));
    }
    let dims = v.dims;
    let mut rois = Vec::new();
    let j = params.jitter as i64;
    for comp in connected_components(m, Connectivity::Full26) {
        let mut c = [0.0f64; 3];
        for &i in &comp {
            let p = unflat(dims, i);
            for a in 0..3 {
                c[a] += p[a] as f64;
            }
        }
        let centroid = c.map(|s| (s / comp.len() as f64).round() as i64);
        let (ox, oy) = if j > 0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0, 0)
        };
        let contains = |o: [usize; 3]| {
            comp.iter().any(|&i| {
                let p = unflat(dims, i);
                (0..3).all(|a| p[a] >= o[a] && p[a] < o[a] + block[a])
            })
        };
        let mut candidates = vec![[centroid[0] + ox, centroid[1] + oy, centroid[2]], centroid];
        let first = unflat(dims, comp[0]);
        candidates.push(first.map(|x| x as i64));
        let origin = candidates
            .into_iter()
            .map(|ctr| [0, 1, 2].map(|a| block_origin(ctr[a], block[a], dims[a])))
            .find(|&o| contains(o))
            .ok_or_else(|| Error::Numeric("could not place calcium ROI".into()))?;
        rois.push(Roi {
            origin,
            kind: RoiKind::Calcium,
            volume: v.crop(origin, block)?,
            mask: m.crop(origin, block)?,
        });
    }
    for _ in 0..params.background_blocks {
        for _attempt in 0..64 {
            let origin = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - block[a]));
            let mb = m.crop(origin, block)?;
            if mb.is_empty() {
                rois.push(Roi {
                    origin,
                    kind: RoiKind::Background,
                    volume: v.crop(origin, block)?,
                    mask: mb,
                });
                break;
            }
        }
    }
    Ok(rois)
}

/// Calcium voxels of a volume held as a dense local block around the mask's
/// bounding box, ready to be resampled at arbitrary sub-voxel offsets.
#[derive(Clone, Debug)]
pub struct CalciumLayer {
    dims: Dims,
    /// Global coordinate of local index 0 (bounding box minus a one-voxel margin).
    base: [i64; 3],
    size: [usize; 3],
    /// Masked source values (zero outside the mask).
    values: Vec<f64>,
    /// Mask indicator as 0/1.
    cover: Vec<f64>,
}

impl CalciumLayer {
    pub fn new(source: &VoxelGrid, m: &BinaryMask) -> Result<Option<Self>> {
        if source.dims != m.dims {
            return Err(Error::invalid("source and mask dims differ"));
        }
        let Some((lo, hi)) = m.bounding_box() else {
            return Ok(None);
        };
        let base = lo.map(|l| l as i64 - 1);
        let size = [0, 1, 2].map(|a| hi[a] - lo[a] + 3);
        let mut values = vec![0.0; size[0] * size[1] * size[2]];
        let mut cover = vec![0.0; values.len()];
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    if m.get(x, y, z) {
                        let li = local_index(size, base, [x as i64, y as i64, z as i64]);
                        values[li] = source.get(x, y, z);
                        cover[li] = 1.0;
                    }
                }
            }
        }
        Ok(Some(Self {
            dims: source.dims,
            base,
            size,
            values,
            cover,
        }))
    }

    /// Sum of the masked source values.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Trilinear samples `(value, coverage)` of the layer at global point `q`.
    fn sample(&self, q: [f64; 3]) -> (f64, f64) {
        let mut f = [0.0; 3];
        let mut i0 = [0i64; 3];
        for a in 0..3 {
            let l = q[a] - self.base[a] as f64;
            let fl = l.floor();
            i0[a] = fl as i64;
            f[a] = l - fl;
        }
        let (mut v, mut c) = (0.0, 0.0);
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - f[2] } else { f[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - f[1] } else { f[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - f[0] } else { f[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    let p = [i0[0] + dx, i0[1] + dy, i0[2] + dz];
                    if (0..3).any(|a| p[a] < 0 || p[a] >= self.size[a] as i64) {
                        continue;
                    }
                    let li = (p[2] as usize * self.size[1] + p[1] as usize) * self.size[0]
                        + p[0] as usize;
                    let w = wx * wy * wz;
                    v += w * self.values[li];
                    c += w * self.cover[li];
                }
            }
        }
        (v, c)
    }

    /// Output voxel range touched by a shift of `d` (inclusive lo, exclusive hi).
    fn footprint(&self, d: [f64; 3]) -> ([usize; 3], [usize; 3]) {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = (self.base[a] as f64 + d[a]).floor() as i64;
            let h = (self.base[a] as f64 + self.size[a] as f64 + d[a]).ceil() as i64 + 1;
            lo[a] = l.clamp(0, self.dims[a] as i64) as usize;
            hi[a] = h.clamp(0, self.dims[a] as i64) as usize;
        }
        (lo, hi)
    }

    /// The shifted, premultiplied calcium layer over the full grid.
    pub fn shifted_layer(&self, d: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims[0] * self.dims[1] * self.dims[2]];
        let (lo, hi) = self.footprint(d);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let q = [x as f64 - d[0], y as f64 - d[1], z as f64 - d[2]];
                    out[flat(self.dims, x, y, z)] = self.sample(q).0;
                }
            }
        }
        out
    }

    /// Composites the layer shifted by `d` over `out` (which holds the
    /// background). Voxels whose interpolated coverage is below 0.5 keep
    /// their background value.
    pub fn composite_into(&self, d: [f64; 3], out: &mut VoxelGrid) {
        debug_assert_eq!(out.dims, self.dims);
        let (lo, hi) = self.footprint(d);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let q = [x as f64 - d[0], y as f64 - d[1], z as f64 - d[2]];
                    let (v, c) = self.sample(q);
                    if c >= 0.5 {
                        let i = flat(self.dims, x, y, z);
                        out.values[i] = v + (1.0 - c) * out.values[i];
                    }
                }
            }
        }
    }
}

fn local_index(size: [usize; 3], base: [i64; 3], g: [i64; 3]) -> usize {
    let l = [0, 1, 2].map(|a| (g[a] - base[a]) as usize);
    (l[2] * size[1] + l[1]) * size[0] + l[0]
}

/// Moves the voxels under `m` by `d` voxels (trilinear) and composites them
/// over `background`.
pub fn shift_region_onto(
    source: &VoxelGrid,
    m: &BinaryMask,
    d: [f64; 3],
    background: &VoxelGrid,
) -> Result<VoxelGrid> {
    if !source.same_geometry(background) || source.dims != m.dims {
        return Err(Error::invalid("shift_region: geometry mismatch"));
    }
    let mut out = background.clone();
    if let Some(layer) = CalciumLayer::new(source, m)? {
        layer.composite_into(d, &mut out);
    }
    Ok(out)
}

/// [`shift_region_onto`] with the source volume itself as background.
pub fn shift_region(v: &VoxelGrid, m: &BinaryMask, d: [f64; 3]) -> Result<VoxelGrid> {
    shift_region_onto(v, m, d, v)
}

pub const INPAINT_TOLERANCE_HU: f64 = 0.1;
pub const INPAINT_MAX_ITERATIONS: usize = 500;

const FACE_NEIGHBORS: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Fills masked voxels by repeated neighbor averaging, seeded with the mean of
/// the mask's boundary ring.
pub fn inpaint(v: &VoxelGrid, m: &BinaryMask) -> Result<VoxelGrid> {
    if v.dims != m.dims {
        return Err(Error::invalid("inpaint: volume and mask dims differ"));
    }
    let masked: Vec<usize> = (0..m.bits.len()).filter(|&i| m.bits[i]).collect();
    if masked.is_empty() {
        return Ok(v.clone());
    }
    if masked.len() == m.bits.len() {
        return Err(Error::invalid("inpaint: mask covers the entire volume"));
    }
    let dims = v.dims;
    let neighbors: Vec<Vec<usize>> = masked
        .iter()
        .map(|&i| {
            let p = unflat(dims, i);
            FACE_NEIGHBORS
                .iter()
                .filter_map(|o| {
                    let q = [p[0] as i64 + o[0], p[1] as i64 + o[1], p[2] as i64 + o[2]];
                    if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                        None
                    } else {
                        Some(flat(dims, q[0] as usize, q[1] as usize, q[2] as usize))
                    }
                })
                .collect()
        })
        .collect();

    let mut ring = Vec::new();
    let mut in_ring = vec![false; m.bits.len()];
    for nb in &neighbors {
        for &j in nb {
            if !m.bits[j] && !in_ring[j] {
                in_ring[j] = true;
                ring.push(v.values[j]);
            }
        }
    }
    let seed = ring.iter().sum::<f64>() / ring.len() as f64;

    let mut out = v.clone();
    for &i in &masked {
        out.values[i] = seed;
    }
    let mut next = vec![0.0; masked.len()];
    for _ in 0..INPAINT_MAX_ITERATIONS {
        let mut max_change: f64 = 0.0;
        for (n, (&i, nb)) in masked.iter().zip(&neighbors).enumerate() {
            let mean = nb.iter().map(|&j| out.values[j]).sum::<f64>() / nb.len() as f64;
            max_change = max_change.max((mean - out.values[i]).abs());
            next[n] = mean;
        }
        for (&i, &val) in masked.iter().zip(&next) {
            out.values[i] = val;
        }
        if max_change < INPAINT_TOLERANCE_HU {
            break;
        }
    }
    Ok(out)
}

/// Values of the unmasked voxels face-adjacent to the mask.
pub fn boundary_ring(v: &VoxelGrid, m: &BinaryMask) -> Vec<f64> {
    let dims = v.dims;
    let mut seen = vec![false; m.bits.len()];
    let mut out = Vec::new();
    for i in (0..m.bits.len()).filter(|&i| m.bits[i]) {
        let p = unflat(dims, i);
        for o in FACE_NEIGHBORS {
            let q = [p[0] as i64 + o[0], p[1] as i64 + o[1], p[2] as i64 + o[2]];
            if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                continue;
            }
            let j = flat(dims, q[0] as usize, q[1] as usize, q[2] as usize);
            if !m.bits[j] && !seen[j] {
                seen[j] = true;
                out.push(v.values[j]);
            }
        }
    }
    out
}
