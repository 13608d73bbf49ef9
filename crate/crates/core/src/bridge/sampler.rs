use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::{check_pair, Denoiser};
use super::schedule::{BridgeSchedule, StepCoefficients};
use crate::error::{Error, Result};
use crate::grid::{stack_central_slices, window_at, NormalizedGrid, Patch};
use crate::rng::{derive_seed, rng_from_seed};

/// `x_t = (1−α_t)x₀ + α_t y + √δ_t ε`; endpoints return `x₀` or `y` exactly.
pub fn forward_sample(
    x0: &Patch,
    y: &Patch,
    t: usize,
    eps: &Patch,
    sched: &BridgeSchedule,
) -> Result<Patch> {
    sched.check_step(t)?;
    check_pair(x0, y)?;
    check_pair(x0, eps)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    if t == sched.t_max() {
        return Ok(y.clone());
    }
    let (a, sd) = (sched.alpha(t), sched.delta(t).sqrt());
    let mut out = x0.clone();
    for ((o, &v), &e) in out.data.iter_mut().zip(&y.data).zip(&eps.data) {
        *o = (1.0 - a) * *o + a * v + sd * e;
    }
    Ok(out)
}

/// `n_t = α_t(y − x₀) + √δ_t ε`, so that `x_t − n_t = x₀`.
pub fn target_noise(
    x0: &Patch,
    y: &Patch,
    t: usize,
    eps: &Patch,
    sched: &BridgeSchedule,
) -> Result<Patch> {
    sched.check_step(t)?;
    check_pair(x0, y)?;
    check_pair(x0, eps)?;
    let (a, sd) = (sched.alpha(t), sched.delta(t).sqrt());
    let mut out = y.clone();
    for ((o, &x), &e) in out.data.iter_mut().zip(&x0.data).zip(&eps.data) {
        *o = a * (*o - x) + sd * e;
    }
    Ok(out)
}

/// Posterior mean `c_x·x_t + c_y·y − c_e·ε̂` for the given step, plus
/// `√var · ξ` when a noise field is supplied.
pub fn posterior_mean(
    xt: &Patch,
    y: &Patch,
    eps_hat: &Patch,
    c: &StepCoefficients,
    xi: Option<&Patch>,
) -> Result<Patch> {
    check_pair(xt, y)?;
    check_pair(xt, eps_hat)?;
    let mut out = xt.clone();
    for ((o, &v), &e) in out.data.iter_mut().zip(&y.data).zip(&eps_hat.data) {
        *o = c.c_x * *o + c.c_y * v - c.c_e * e;
    }
    if let Some(xi) = xi {
        check_pair(xt, xi)?;
        let sd = c.var.sqrt();
        for (o, &n) in out.data.iter_mut().zip(&xi.data) {
            *o += sd * n;
        }
    }
    Ok(out)
}

/// One reverse step `t → t−1` (deterministic mean).
pub fn posterior_step(
    xt: &Patch,
    y: &Patch,
    eps_hat: &Patch,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<Patch> {
    posterior_mean(xt, y, eps_hat, sched.step(t)?, None)
}

/// The literal update `x_t − ε̂`.
pub fn direct_step(xt: &Patch, y: &Patch, eps_hat: &Patch) -> Result<Patch> {
    check_pair(xt, y)?;
    check_pair(xt, eps_hat)?;
    Ok(xt.zip_map(eps_hat, |a, b| a - b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Direct,
    /// Deterministic posterior mean at every visited step.
    #[default]
    Posterior,
    /// Posterior mean plus posterior noise drawn from the given seed.
    Stochastic {
        seed: u64,
    },
}

impl SampleMode {
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "posterior" => Ok(Self::Posterior),
            "stochastic" => Ok(Self::Stochastic { seed }),
            other => Err(Error::invalid(format!(
                "unknown sampler mode {other:?} (direct, posterior, stochastic)"
            ))),
        }
    }
}

/// States visited during reverse sampling, from `t = T` down to `t = 0`.
#[derive(Clone, Debug, Default)]
pub struct SampleTrace {
    pub states: Vec<(usize, Patch)>,
}

impl SampleTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn normal_patch(like: &Patch, seed: u64) -> Patch {
    let mut rng = rng_from_seed(seed);
    let data = (0..like.data.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Patch { data, ..*like }
}

/// Reverse sampling from `x_T = y` over the coarse grid `T, T−interval, …, 0`.
pub fn sample(
    y: &Patch,
    denoiser: &dyn Denoiser,
    sched: &BridgeSchedule,
    mode: SampleMode,
) -> Result<(Patch, SampleTrace)> {
    if let Some(k) = denoiser.window_depth() {
        if k != y.k {
            return Err(Error::invalid(format!(
                "denoiser expects {k}-slice windows, got {}",
                y.k
            )));
        }
    }
    let mut x = y.clone();
    let mut trace = SampleTrace {
        states: vec![(sched.t_max(), x.clone())],
    };
    for c in sched.sampling_coefficients() {
        let eps_hat = denoiser.predict(&x, y, c.t)?;
        if !eps_hat.same_shape(&x) {
            return Err(Error::invalid("denoiser output shape differs from x_t"));
        }
        x = match mode {
            SampleMode::Direct => direct_step(&x, y, &eps_hat)?,
            SampleMode::Posterior => posterior_mean(&x, y, &eps_hat, &c, None)?,
            SampleMode::Stochastic { seed } => {
                let xi = normal_patch(&x, derive_seed(seed, c.t as u64));
                posterior_mean(&x, y, &eps_hat, &c, Some(&xi))?
            }
        };
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state at step {}", c.s)));
        }
        trace.states.push((c.s, x.clone()));
    }
    Ok((x, trace))
}

/// 2.5D correction: one `k`-slice window per axial slice (stride 1, clamped
/// edges), each sampled independently; the central slices are restacked.
/// `denoiser_for(center)` supplies the denoiser for the window at `center`.
pub fn sliding_window_correct_with<D, F>(
    roi: &NormalizedGrid,
    k: usize,
    sched: &BridgeSchedule,
    mode: SampleMode,
    denoiser_for: F,
) -> Result<NormalizedGrid>
where
    D: Denoiser,
    F: Fn(usize) -> D + Sync,
{
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "window depth k must be odd, got {k}"
        )));
    }
    let dims = roi.dims();
    if dims[2] == 0 {
        return Err(Error::invalid("ROI has no slices"));
    }
    let slices: Vec<Vec<f64>> = (0..dims[2])
        .into_par_iter()
        .map(|z| {
            let y = window_at(roi.values(), dims, z, k);
            let d = denoiser_for(z);
            let m = match mode {
                SampleMode::Stochastic { seed } => SampleMode::Stochastic {
                    seed: derive_seed(seed, z as u64),
                },
                m => m,
            };
            let (x, _) = sample(&y, &d, sched, m)?;
            Ok(x.central_slice().to_vec())
        })
        .collect::<Result<_>>()?;
    stack_central_slices(&slices, dims, roi.spacing())
}

/// [`sliding_window_correct_with`] using one denoiser for every window.
pub fn sliding_window_correct(
    roi: &NormalizedGrid,
    denoiser: &dyn Denoiser,
    sched: &BridgeSchedule,
    mode: SampleMode,
    k: usize,
) -> Result<NormalizedGrid> {
    sliding_window_correct_with(roi, k, sched, mode, |_| ByRef(denoiser))
}

struct ByRef<'a>(&'a dyn Denoiser);

impl Denoiser for ByRef<'_> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn window_depth(&self) -> Option<usize> {
        self.0.window_depth()
    }

    fn predict(&self, xt: &Patch, y: &Patch, t: usize) -> Result<Patch> {
        self.0.predict(xt, y, t)
    }
}
