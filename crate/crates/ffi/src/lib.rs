//! C ABI for the cacmotion library.
//!
//! Objects cross the boundary as opaque handles (`CmVolume`, `CmMask`,
//! `CmDenoiser`) created by `cm_*_new`/`cm_*_load` and released with the
//! matching `cm_*_free`. Every fallible function returns a [`CmStatus`]; on
//! failure `cm_last_error_message` describes the error for the calling thread.
//! Panics never unwind into the caller; they surface as `CM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cacmotion::bridge::{checkpoint, BridgeSchedule, Denoiser, IdentityDenoiser, SampleMode};
use cacmotion::grid::{BinaryMask, VoxelGrid};
use cacmotion::pipeline::correct_volume;
use cacmotion::score::{agatston, dice_loss, volume_score};
use cacmotion::simulate::{make_phantom, simulate_motion, PhantomSpec, SimConfig};
use cacmotion::tomo::{detector_bins, fbp, radon_full, AngleSet, FbpOptions, RampWindow, Sinogram};
use cacmotion::volume_io::{read_mask, read_volume, write_volume, Unit};
use cacmotion::Error;

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmStatus {
    Ok = 0,
    InvalidArgument = 1,
    Io = 2,
    Numeric = 3,
    NullPointer = 4,
    Panic = 5,
}

/// HU volume with voxel spacing.
pub struct CmVolume(VoxelGrid);

/// Binary calcium mask.
pub struct CmMask(BinaryMask);

/// A correction model plus the schedule and window it expects.
pub struct CmDenoiser {
    inner: Box<dyn Denoiser>,
    sched: BridgeSchedule,
    k: usize,
    tile: Option<[usize; 2]>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            1 => CmStatus::InvalidArgument,
            2 => CmStatus::Io,
            _ => CmStatus::Numeric,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(CmStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CmStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = value;
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ---------------------------------------------------------------- volumes

/// Creates a volume. `values` holds `nx*ny*nz` HU values (x fastest) or is
/// null for an all-zero volume.
///
/// # Safety
/// `values` must be null or point to `nx*ny*nz` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_volume_new(
    nx: usize,
    ny: usize,
    nz: usize,
    spacing: *const f64,
    values: *const f64,
    out: *mut *mut CmVolume,
) -> CmStatus {
    guard(|| {
        let s = slice_arg(spacing, 3, "spacing")?;
        if s.len() != 3 {
            return Err(null("spacing"));
        }
        let n = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| invalid("dims overflow"))?;
        let vals = if values.is_null() {
            vec![0.0; n]
        } else {
            slice_arg(values, n, "values")?.to_vec()
        };
        let v = VoxelGrid::new([nx, ny, nz], [s[0], s[1], s[2]], vals)?;
        put(out, CmVolume(v))
    })
}

/// # Safety
/// `v` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cm_volume_free(v: *mut CmVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Writes dims (3 values) and spacing in mm (3 values); either may be null.
///
/// # Safety
/// Non-null outputs must have room for 3 elements.
#[no_mangle]
pub unsafe extern "C" fn cm_volume_dims(
    v: *const CmVolume,
    dims: *mut usize,
    spacing: *mut f64,
) -> CmStatus {
    guard(|| {
        let v = &obj(v, "volume")?.0;
        if !dims.is_null() {
            slice_out(dims, 3, "dims")?.copy_from_slice(&v.dims());
        }
        if !spacing.is_null() {
            slice_out(spacing, 3, "spacing")?.copy_from_slice(&v.spacing());
        }
        Ok(())
    })
}

/// Copies all voxel values into `out`, which must hold exactly `len = nx*ny*nz`.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cm_volume_copy_values(
    v: *const CmVolume,
    out: *mut f64,
    len: usize,
) -> CmStatus {
    guard(|| {
        let v = &obj(v, "volume")?.0;
        if len != v.len() {
            return Err(invalid(format!(
                "buffer holds {len} values, volume has {}",
                v.len()
            )));
        }
        slice_out(out, len, "out")?.copy_from_slice(v.values());
        Ok(())
    })
}

/// Reads a `.raw` volume with its JSON sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_volume_load(path: *const c_char, out: *mut *mut CmVolume) -> CmStatus {
    guard(|| {
        let (v, _) = read_volume(&path_arg(path)?)?;
        put(out, CmVolume(v))
    })
}

/// Writes the volume as `.raw` plus sidecar (HU units).
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cm_volume_save(v: *const CmVolume, path: *const c_char) -> CmStatus {
    guard(|| {
        let v = &obj(v, "volume")?.0;
        Ok(write_volume(&path_arg(path)?, v, Unit::Hu)?)
    })
}

// ---------------------------------------------------------------- masks

/// Creates a mask from `nx*ny*nz` bytes (nonzero = calcium).
///
/// # Safety
/// `bits` must point to `nx*ny*nz` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_mask_new(
    nx: usize,
    ny: usize,
    nz: usize,
    bits: *const u8,
    out: *mut *mut CmMask,
) -> CmStatus {
    guard(|| {
        let n = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| invalid("dims overflow"))?;
        let b = slice_arg(bits, n, "bits")?
            .iter()
            .map(|&x| x != 0)
            .collect();
        put(out, CmMask(BinaryMask::new([nx, ny, nz], b)?))
    })
}

/// Mask of voxels at or above `threshold_hu`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_mask_threshold(
    v: *const CmVolume,
    threshold_hu: f64,
    out: *mut *mut CmMask,
) -> CmStatus {
    guard(|| {
        let v = &obj(v, "volume")?.0;
        put(out, CmMask(BinaryMask::threshold(v, threshold_hu)))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_mask_load(path: *const c_char, out: *mut *mut CmMask) -> CmStatus {
    guard(|| {
        let (m, _) = read_mask(&path_arg(path)?)?;
        put(out, CmMask(m))
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_mask_count(m: *const CmMask, out: *mut usize) -> CmStatus {
    guard(|| {
        let m = &obj(m, "mask")?.0;
        write(out, m.count(), "out")
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cm_mask_free(m: *mut CmMask) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

// ---------------------------------------------------------------- scoring

/// Agatston score and risk grade (0 none, 1 minimal, 2 mild, 3 moderate,
/// 4 severe). `grade` may be null.
///
/// # Safety
/// `score` must be writable; `grade` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cm_agatston(
    v: *const CmVolume,
    score: *mut f64,
    grade: *mut c_int,
) -> CmStatus {
    guard(|| {
        let r = agatston(&obj(v, "volume")?.0)?;
        write(score, r.agatston, "score")?;
        if !grade.is_null() {
            *grade = r.grade.index() as c_int;
        }
        Ok(())
    })
}

/// Differentiable volume score (mm³) with sigmoid temperature `tau` (HU).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_volume_score(v: *const CmVolume, tau: f64, out: *mut f64) -> CmStatus {
    guard(|| {
        let s = volume_score(&obj(v, "volume")?.0, tau)?;
        write(out, s, "out")
    })
}

/// `1 − Dice` between the prediction thresholded at 130 HU and `reference`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_dice_loss(
    pred: *const CmVolume,
    reference: *const CmMask,
    out: *mut f64,
) -> CmStatus {
    guard(|| {
        let d = dice_loss(&obj(pred, "pred")?.0, &obj(reference, "reference")?.0)?;
        write(out, d, "out")
    })
}

// ---------------------------------------------------------------- simulation

/// Default 64×64×16 phantom and its calcium mask.
///
/// # Safety
/// Both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_phantom(
    seed: u64,
    volume: *mut *mut CmVolume,
    mask: *mut *mut CmMask,
) -> CmStatus {
    guard(|| {
        if volume.is_null() || mask.is_null() {
            return Err(null("output handle"));
        }
        let (v, m) = make_phantom(&PhantomSpec::default(), seed)?;
        put(volume, CmVolume(v))?;
        put(mask, CmMask(m))
    })
}

/// Motion-corrupted reconstruction of `clean` using a named preset with `n_angles`
/// projections. A NaN `amplitude` keeps the preset's sampled amplitude.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_simulate(
    clean: *const CmVolume,
    mask: *const CmMask,
    preset: *const c_char,
    n_angles: usize,
    seed: u64,
    amplitude: f64,
    out: *mut *mut CmVolume,
) -> CmStatus {
    guard(|| {
        let x0 = &obj(clean, "clean")?.0;
        let m = &obj(mask, "mask")?.0;
        if preset.is_null() {
            return Err(null("preset"));
        }
        let name = CStr::from_ptr(preset)
            .to_str()
            .map_err(|_| invalid("preset is not valid UTF-8"))?;
        let mut cfg = SimConfig::preset(name, n_angles, seed);
        if !amplitude.is_nan() {
            cfg.amplitude_override = Some(amplitude);
        }
        let pair = simulate_motion(x0, m, &cfg)?;
        put(out, CmVolume(pair.y))
    })
}

/// Detector bins used for an `n × n` slice.
#[no_mangle]
pub extern "C" fn cm_detector_bins(n: usize) -> usize {
    detector_bins(n)
}

/// Parallel-beam projections of an `n × n` slice at `n_angles` angles (degrees,
/// strictly increasing). `out` receives `n_angles * cm_detector_bins(n)`
/// values, angle-major.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cm_radon(
    slice: *const f64,
    n: usize,
    spacing: f64,
    angles_deg: *const f64,
    n_angles: usize,
    out: *mut f64,
    out_len: usize,
) -> CmStatus {
    guard(|| {
        let img = slice_arg(slice, n * n, "slice")?;
        let angles = AngleSet::from_degrees(slice_arg(angles_deg, n_angles, "angles")?.to_vec())?;
        let s = radon_full(img, n, spacing, &angles)?;
        if out_len != s.data.len() {
            return Err(invalid(format!(
                "output holds {out_len} values, sinogram has {}",
                s.data.len()
            )));
        }
        slice_out(out, out_len, "out")?.copy_from_slice(&s.data);
        Ok(())
    })
}

/// Filtered back-projection of an angle-major sinogram onto an `n × n` slice.
/// `hann` selects the Hann-windowed ramp; pixels outside the inscribed circle
/// get `outside_value`.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths; `out` holds `n * n`.
#[no_mangle]
pub unsafe extern "C" fn cm_fbp(
    sinogram: *const f64,
    n_angles: usize,
    bins: usize,
    bin_spacing: f64,
    angles_deg: *const f64,
    n: usize,
    hann: bool,
    outside_value: f64,
    out: *mut f64,
) -> CmStatus {
    guard(|| {
        let data = slice_arg(sinogram, n_angles * bins, "sinogram")?.to_vec();
        let angles = AngleSet::from_degrees(slice_arg(angles_deg, n_angles, "angles")?.to_vec())?;
        let s = Sinogram {
            n_angles,
            bins,
            bin_spacing,
            data,
        };
        let opts = FbpOptions {
            window: if hann {
                RampWindow::Hann
            } else {
                RampWindow::RamLak
            },
            outside_value,
        };
        let img = fbp(&s, &angles, n, &opts)?;
        slice_out(out, n * n, "out")?.copy_from_slice(&img);
        Ok(())
    })
}

// ---------------------------------------------------------------- correction

/// Denoiser predicting zero noise (correction returns the clipped input).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_denoiser_identity(k: usize, out: *mut *mut CmDenoiser) -> CmStatus {
    guard(|| {
        if k == 0 || k.is_multiple_of(2) {
            return Err(invalid(format!("window depth k must be odd, got {k}")));
        }
        put(
            out,
            CmDenoiser {
                inner: Box::new(IdentityDenoiser),
                sched: BridgeSchedule::new(1000, 100)?,
                k,
                tile: None,
            },
        )
    })
}

/// Loads a trained checkpoint (`model.bin` next to `model.json`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_denoiser_load(
    path: *const c_char,
    out: *mut *mut CmDenoiser,
) -> CmStatus {
    guard(|| {
        let (net, header) = checkpoint::load(&path_arg(path)?)?;
        let [h, w, k] = header.window;
        let hp = &header.hyperparameters;
        put(
            out,
            CmDenoiser {
                inner: Box::new(net),
                sched: BridgeSchedule::new(hp.t_max, hp.interval)?,
                k,
                tile: Some([w, h]),
            },
        )
    })
}

/// # Safety
/// `d` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cm_denoiser_free(d: *mut CmDenoiser) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Corrects a volume with the 2.5D bridge sampler. `mode`: 0 direct,
/// 1 posterior, 2 stochastic (seeded by `seed`).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_correct(
    v: *const CmVolume,
    d: *const CmDenoiser,
    mode: c_int,
    seed: u64,
    out: *mut *mut CmVolume,
) -> CmStatus {
    guard(|| {
        let v = &obj(v, "volume")?.0;
        let d = obj(d, "denoiser")?;
        let mode = match mode {
            0 => SampleMode::Direct,
            1 => SampleMode::Posterior,
            2 => SampleMode::Stochastic { seed },
            m => return Err(invalid(format!("unknown sampler mode {m}"))),
        };
        let [nx, ny, _] = v.dims();
        let tile = d.tile.unwrap_or([nx, ny]);
        let fixed = correct_volume(v, d.inner.as_ref(), &d.sched, mode, d.k, tile)?;
        put(out, CmVolume(fixed))
    })
}
