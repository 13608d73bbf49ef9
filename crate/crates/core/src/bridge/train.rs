use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::TrainableDenoiser;
use super::sampler::{forward_sample, target_noise};
use super::schedule::BridgeSchedule;
use crate::error::{Error, Result};
use crate::grid::{denormalize_unit, Patch, DENORMALIZE_SLOPE};
use crate::score::{calcium_consistency_loss, DEFAULT_TAU};

/// Adaptive-moment optimizer with L2 weight decay added to the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = g + c.weight_decay * *p;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_max: usize,
    pub interval: usize,
    /// Weight of the calcium consistency term.
    pub lambda: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_max: BridgeSchedule::DEFAULT_T,
            interval: BridgeSchedule::DEFAULT_INTERVAL,
            lambda: 20.0,
            tau: DEFAULT_TAU,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        BridgeSchedule::new(self.t_max, self.interval).map(|_| ())
    }
}

/// One normalized training pair with the physical voxel volume (mm³).
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub x0: Patch,
    pub y: Patch,
    pub voxel_volume: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub calc: f64,
    pub total: f64,
}

/// Random draws for one batch item.
#[derive(Clone, Debug)]
pub struct Draw {
    pub t: usize,
    pub eps: Patch,
}

pub fn draw_for<R: Rng>(ex: &TrainingExample, t_max: usize, rng: &mut R) -> Draw {
    let t = rng.random_range(1..=t_max);
    let data = (0..ex.y.data.len())
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    let eps = Patch { data, ..ex.y };
    Draw { t, eps }
}

/// Batch-mean loss `‖n_t − ε̂‖²/n + λ·L_calc(x₀, x̂₀)` and its parameter gradient,
/// for fixed draws.
pub fn loss_and_grad<D: TrainableDenoiser>(
    denoiser: &D,
    batch: &[TrainingExample],
    draws: &[Draw],
    cfg: &TrainConfig,
    sched: &BridgeSchedule,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::invalid(
            "batch must be nonempty with one draw per item",
        ));
    }
    let n_params = denoiser.params().len();
    let scale = 1.0 / batch.len() as f64;
    let items: Vec<(LossBreakdown, Vec<f64>)> = batch
        .par_iter()
        .zip(draws.par_iter())
        .enumerate()
        .map(|(idx, (ex, d))| {
            let xt = forward_sample(&ex.x0, &ex.y, d.t, &d.eps, sched)?;
            let nt = target_noise(&ex.x0, &ex.y, d.t, &d.eps, sched)?;
            let (eps_hat, cache) = denoiser.forward_cached(&xt, &ex.y, d.t)?;
            let nvox = eps_hat.data.len() as f64;
            let mut mse = 0.0;
            let mut d_out = eps_hat.clone();
            for ((g, &e), &n) in d_out.data.iter_mut().zip(&eps_hat.data).zip(&nt.data) {
                mse += (n - e) * (n - e);
                *g = -2.0 * (n - e) / nvox * scale;
            }
            mse /= nvox;
            let mut calc = 0.0;
            if cfg.lambda > 0.0 {
                let x0_hu: Vec<f64> = ex.x0.data.iter().map(|&v| denormalize_unit(v)).collect();
                let xhat_hu: Vec<f64> = xt
                    .data
                    .iter()
                    .zip(&eps_hat.data)
                    .map(|(&x, &e)| denormalize_unit(x - e))
                    .collect();
                let (l, g) = calcium_consistency_loss(&x0_hu, &xhat_hu, ex.voxel_volume, cfg.tau)?;
                calc = l;
                // x̂₀ = x_t − ε̂ in normalized units, then the affine map to HU.
                for (o, gv) in d_out.data.iter_mut().zip(&g) {
                    *o -= cfg.lambda * gv * DENORMALIZE_SLOPE * scale;
                }
            }
            let total = mse + cfg.lambda * calc;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss for batch item {idx} at t={}: mse={mse}, calc={calc}",
                    d.t
                )));
            }
            let mut grad = vec![0.0; n_params];
            denoiser.backward(&cache, &d_out, &mut grad);
            Ok((LossBreakdown { mse, calc, total }, grad))
        })
        .collect::<Result<_>>()?;

    // Fixed-order reduction keeps results independent of the thread count.
    let mut loss = LossBreakdown::default();
    let mut grad = vec![0.0; n_params];
    for (l, g) in &items {
        loss.mse += l.mse * scale;
        loss.calc += l.calc * scale;
        loss.total += l.total * scale;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((loss, grad))
}

/// Denoiser, optimizer moments and step counter owned by one trainer.
#[derive(Clone, Debug)]
pub struct TrainState<D> {
    pub denoiser: D,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub sched: BridgeSchedule,
    pub step: u64,
}

impl<D: TrainableDenoiser> TrainState<D> {
    pub fn new(denoiser: D, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = BridgeSchedule::new(cfg.t_max, cfg.interval)?;
        let adam = Adam::new(cfg.adam, denoiser.params().len());
        Ok(Self {
            denoiser,
            adam,
            cfg,
            sched,
            step: 0,
        })
    }
}

/// Samples `t` and `ε` per item, evaluates the loss and applies one update.
pub fn train_step<D: TrainableDenoiser, R: Rng>(
    state: &mut TrainState<D>,
    batch: &[TrainingExample],
    rng: &mut R,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let draws: Vec<Draw> = batch
        .iter()
        .map(|ex| draw_for(ex, state.cfg.t_max, rng))
        .collect();
    let (loss, grad) = loss_and_grad(&state.denoiser, batch, &draws, &state.cfg, &state.sched)
        .map_err(|e| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("training step {}: {msg}", state.step + 1))
            }
            other => other,
        })?;
    state.adam.update(state.denoiser.params_mut(), &grad);
    state.step += 1;
    Ok(loss)
}
