//! Motion families and trajectory generation.
//!
//! A trajectory holds one displacement per projection angle, expressed in
//! in-plane pixel units for all three axes (the simulator rescales the axial
//! component into slice units).

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    Translation,
    Oscillation,
    LocalJitter,
    Piecewise,
}

/// Two-segment move–dwell–move parameters. Breakpoint and dwell are stored as
/// fractions of the scan and turned into step indices for a given `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseParams {
    pub amplitudes: [f64; 2],
    pub directions: [[f64; 3]; 2],
    pub breakpoint_fraction: f64,
    pub dwell_fraction: f64,
}

impl PiecewiseParams {
    /// `(b1, e)`: ramp 1 over steps `0..=b1`, dwell over `b1..=e`, ramp 2 over `e..N`.
    pub fn step_indices(&self, n: usize) -> (usize, usize) {
        let last = n.saturating_sub(1) as f64;
        let b1 = (self.breakpoint_fraction * last).round().max(1.0) as usize;
        let dwell = (self.dwell_fraction * last).round().max(1.0) as usize;
        (b1, b1 + dwell)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProfileSpec {
    pub family: MotionFamily,
    /// Displacement magnitude A (pixels).
    pub amplitude: f64,
    /// Phase shift β (radians).
    pub phase: f64,
    /// Displacement ratios (r_x, r_y, r_z).
    pub ratios: [f64; 3],
    /// Per-axis direction signs (±1) for translation and oscillation.
    pub signs: [f64; 3],
    /// Jitter weights w_k and unit directions u_k.
    pub jitter_weights: [f64; 3],
    pub jitter_directions: [[f64; 3]; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piecewise: Option<PiecewiseParams>,
}

impl MotionProfileSpec {
    /// A spec with no displacement for every family member.
    pub fn stationary(family: MotionFamily) -> Self {
        Self {
            family,
            amplitude: 0.0,
            phase: 0.0,
            ratios: [1.0, 1.0, 1.0],
            signs: [1.0; 3],
            jitter_weights: [1.0, 0.0, 0.0],
            jitter_directions: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            piecewise: (family == MotionFamily::Piecewise).then_some(PiecewiseParams {
                amplitudes: [0.0, 0.0],
                directions: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                breakpoint_fraction: 0.4,
                dwell_fraction: 0.1,
            }),
        }
    }

    /// Rescales every amplitude so the profile's magnitude parameter becomes `a`.
    pub fn with_amplitude(mut self, a: f64) -> Self {
        if let Some(pw) = self.piecewise.as_mut() {
            let total = pw.amplitudes[0] + pw.amplitudes[1];
            pw.amplitudes = if total > 0.0 {
                [a * pw.amplitudes[0] / total, a * pw.amplitudes[1] / total]
            } else {
                [a / 2.0, a / 2.0]
            };
        }
        self.amplitude = a;
        self
    }
}

/// Per-angle displacement vectors (pixels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub displacements: Vec<[f64; 3]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn max_norm(&self) -> f64 {
        self.displacements
            .iter()
            .map(|d| norm(*d))
            .fold(0.0, f64::max)
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn scale(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Axis amplitudes with the dominant axis carrying `a`:
/// `A · r / max(r)`.
pub fn axis_amplitudes(a: f64, ratios: [f64; 3]) -> Result<[f64; 3]> {
    if !(a > 0.0) || ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::invalid(format!(
            "amplitude and ratios must be positive, got A={a} r={ratios:?}"
        )));
    }
    let m = ratios.iter().cloned().fold(f64::MIN, f64::max);
    Ok(ratios.map(|r| a * r / m))
}

fn check_family(spec: &MotionProfileSpec, family: MotionFamily) -> Result<()> {
    if spec.family != family {
        return Err(Error::invalid(format!(
            "expected a {family:?} spec, got {:?}",
            spec.family
        )));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("trajectory length N must be >= 1"));
    }
    Ok(())
}

/// Signed axis amplitudes; zero amplitude yields a zero vector.
fn signed_axes(spec: &MotionProfileSpec) -> Result<[f64; 3]> {
    if spec.amplitude == 0.0 {
        return Ok([0.0; 3]);
    }
    let axes = axis_amplitudes(spec.amplitude, spec.ratios)?;
    Ok([0, 1, 2].map(|i| axes[i] * spec.signs[i]))
}

/// Drift `d(t_i) = V · i` with `V = A_axis / N`.
pub fn gen_translation(spec: &MotionProfileSpec, n: usize) -> Result<Trajectory> {
    check_family(spec, MotionFamily::Translation)?;
    check_n(n)?;
    let v = scale(signed_axes(spec)?, 1.0 / n as f64);
    Ok(Trajectory {
        displacements: (0..n).map(|i| scale(v, i as f64)).collect(),
    })
}

/// `d(t_i) = cos(2π i / N + β) · A_axis`.
pub fn gen_oscillation(spec: &MotionProfileSpec, n: usize) -> Result<Trajectory> {
    check_family(spec, MotionFamily::Oscillation)?;
    check_n(n)?;
    let axes = signed_axes(spec)?;
    Ok(Trajectory {
        displacements: (0..n)
            .map(|i| scale(axes, (2.0 * PI * i as f64 / n as f64 + spec.phase).cos()))
            .collect(),
    })
}

/// Unscaled jitter shape `Σ_k w_k sin(2π k i / N + β) u_k`.
pub fn jitter_shape(spec: &MotionProfileSpec, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let mut d = [0.0; 3];
            for k in 0..3 {
                let s = spec.jitter_weights[k]
                    * (2.0 * PI * (k + 1) as f64 * i as f64 / n as f64 + spec.phase).sin();
                d = add(d, scale(spec.jitter_directions[k], s));
            }
            d
        })
        .collect()
}

/// Jitter scaled post hoc so the largest displacement on the sampled grid
/// has norm exactly `A`.
pub fn gen_jitter(spec: &MotionProfileSpec, n: usize) -> Result<Trajectory> {
    check_family(spec, MotionFamily::LocalJitter)?;
    check_n(n)?;
    if spec.jitter_weights.iter().all(|&w| w == 0.0) {
        return Err(Error::invalid("jitter weights are all zero"));
    }
    for u in &spec.jitter_directions {
        if (norm(*u) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("jitter directions must be unit vectors"));
        }
    }
    let shape = jitter_shape(spec, n);
    let peak = shape.iter().map(|d| norm(*d)).fold(0.0, f64::max);
    if spec.amplitude == 0.0 {
        return Ok(Trajectory {
            displacements: vec![[0.0; 3]; n],
        });
    }
    if peak == 0.0 {
        return Err(Error::invalid("jitter shape vanishes on the sampled grid"));
    }
    let alpha = spec.amplitude / peak;
    Ok(Trajectory {
        displacements: shape.into_iter().map(|d| scale(d, alpha)).collect(),
    })
}

/// Linear ramp to `A1 u1`, dwell, then a ramp adding `A2 u2` that ends at the last step.
pub fn gen_piecewise(spec: &MotionProfileSpec, n: usize) -> Result<Trajectory> {
    check_family(spec, MotionFamily::Piecewise)?;
    check_n(n)?;
    let pw = spec
        .piecewise
        .as_ref()
        .ok_or_else(|| Error::invalid("piecewise spec without segment parameters"))?;
    let (b1, e) = pw.step_indices(n);
    if !(0 < b1 && b1 < e && e < n - 1) {
        return Err(Error::invalid(format!(
            "invalid piecewise breakpoints b1={b1}, dwell end={e} for N={n}"
        )));
    }
    let seg1 = scale(pw.directions[0], pw.amplitudes[0]);
    let seg2 = scale(pw.directions[1], pw.amplitudes[1]);
    let last = (n - 1) as f64;
    Ok(Trajectory {
        displacements: (0..n)
            .map(|i| {
                if i <= b1 {
                    scale(seg1, i as f64 / b1 as f64)
                } else if i <= e {
                    seg1
                } else {
                    add(seg1, scale(seg2, (i - e) as f64 / (last - e as f64)))
                }
            })
            .collect(),
    })
}

pub fn generate(spec: &MotionProfileSpec, n: usize) -> Result<Trajectory> {
    let t = match spec.family {
        MotionFamily::Translation => gen_translation(spec, n),
        MotionFamily::Oscillation => gen_oscillation(spec, n),
        MotionFamily::LocalJitter => gen_jitter(spec, n),
        MotionFamily::Piecewise => gen_piecewise(spec, n),
    }?;
    if t.displacements.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite trajectory component".into()));
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisChoice {
    X,
    Y,
    Xy,
    Any,
}

/// One entry of the preset catalog: family, dominant axis and amplitude range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPreset {
    pub name: String,
    pub family: MotionFamily,
    pub axis: AxisChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_axis: Option<AxisChoice>,
    pub amplitude: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRanges {
    pub dominant_in_plane: [f64; 2],
    pub secondary_in_plane: [f64; 2],
    pub axial: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseRanges {
    pub breakpoint_fraction: [f64; 2],
    pub dwell_fraction: [f64; 2],
    pub first_segment_share: [f64; 2],
}

/// The versioned preset file committed under `presets/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetCatalog {
    pub version: u32,
    pub seed_rule: String,
    pub amplitude_bounds_px: [f64; 2],
    pub ratio_ranges: RatioRanges,
    pub piecewise: PiecewiseRanges,
    pub presets: Vec<MotionPreset>,
}

pub const PRESET_JSON: &str = include_str!("../presets/motion_presets.json");

/// The built-in catalog of 21 presets.
pub fn preset_catalog() -> &'static PresetCatalog {
    static CATALOG: OnceLock<PresetCatalog> = OnceLock::new();
    CATALOG
        .get_or_init(|| serde_json::from_str(PRESET_JSON).expect("bundled preset catalog parses"))
}

pub fn find_preset(name: &str) -> Result<&'static MotionPreset> {
    preset_catalog()
        .presets
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::invalid(format!("unknown motion preset {name:?}")))
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn sign<R: Rng>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Unit direction near the chosen in-plane axis with a small axial component.
fn random_direction<R: Rng>(rng: &mut R, axis: AxisChoice, axial: [f64; 2]) -> [f64; 3] {
    let spread = 20f64.to_radians();
    let phi = match axis {
        AxisChoice::X => {
            rng.random_range(-spread..spread) + if rng.random::<bool>() { 0.0 } else { PI }
        }
        AxisChoice::Y => rng.random_range(-spread..spread) + PI / 2.0 * sign(rng),
        AxisChoice::Xy => {
            rng.random_range(-spread..spread) + PI / 4.0 + PI / 2.0 * rng.random_range(0..4) as f64
        }
        AxisChoice::Any => rng.random_range(0.0..2.0 * PI),
    };
    let z = 0.5 * uniform(rng, axial) * sign(rng);
    let v = [phi.cos(), phi.sin(), z];
    scale(v, 1.0 / norm(v))
}

impl MotionPreset {
    /// Per-preset seed derived from the run seed and the preset name.
    pub fn derived_seed(&self, seed: u64) -> u64 {
        crate::rng::derive_seed(seed, fnv1a64(&self.name))
    }

    /// Draws randomized parameters for this preset.
    pub fn sample(&self, seed: u64) -> MotionProfileSpec {
        let cat = preset_catalog();
        let rr = &cat.ratio_ranges;
        let mut rng = rng_for(seed, fnv1a64(&self.name));
        let amplitude = uniform(&mut rng, self.amplitude);
        let phase = rng.random_range(0.0..2.0 * PI);
        let axis = match self.axis {
            AxisChoice::Any => {
                if rng.random::<bool>() {
                    AxisChoice::X
                } else {
                    AxisChoice::Y
                }
            }
            a => a,
        };
        let (rx, ry) = match axis {
            AxisChoice::X => (
                uniform(&mut rng, rr.dominant_in_plane),
                uniform(&mut rng, rr.secondary_in_plane),
            ),
            AxisChoice::Y => (
                uniform(&mut rng, rr.secondary_in_plane),
                uniform(&mut rng, rr.dominant_in_plane),
            ),
            _ => (
                uniform(&mut rng, rr.dominant_in_plane),
                uniform(&mut rng, rr.dominant_in_plane),
            ),
        };
        let rz = uniform(&mut rng, rr.axial);
        let signs = [sign(&mut rng), sign(&mut rng), sign(&mut rng)];
        let mut jitter_weights = [0.0; 3];
        let mut jitter_directions = [[0.0; 3]; 3];
        for k in 0..3 {
            jitter_weights[k] = rng.random_range(0.2..1.0);
            jitter_directions[k] = random_direction(&mut rng, AxisChoice::Any, rr.axial);
        }
        let piecewise = (self.family == MotionFamily::Piecewise).then(|| {
            let pr = &cat.piecewise;
            let share = uniform(&mut rng, pr.first_segment_share);
            let u1 = random_direction(&mut rng, self.axis, rr.axial);
            let mut u2 = random_direction(
                &mut rng,
                self.second_axis.unwrap_or(AxisChoice::Any),
                rr.axial,
            );
            if u1[0] * u2[0] + u1[1] * u2[1] + u1[2] * u2[2] < 0.0 {
                u2 = scale(u2, -1.0);
            }
            PiecewiseParams {
                amplitudes: [amplitude * share, amplitude * (1.0 - share)],
                directions: [u1, u2],
                breakpoint_fraction: uniform(&mut rng, pr.breakpoint_fraction),
                dwell_fraction: uniform(&mut rng, pr.dwell_fraction),
            }
        });
        MotionProfileSpec {
            family: self.family,
            amplitude,
            phase,
            ratios: [rx, ry, rz],
            signs,
            jitter_weights,
            jitter_directions,
            piecewise,
        }
    }
}
