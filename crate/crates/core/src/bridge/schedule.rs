use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reverse-step coefficients for a move from step `t` to step `s < t`:
/// `μ = c_x·x_t + c_y·y − c_e·ε̂`, with posterior variance `var`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub t: usize,
    pub s: usize,
    pub c_x: f64,
    pub c_y: f64,
    /// Non-negative; enters the mean with a minus sign.
    pub c_e: f64,
    /// `δ_{t|s}`.
    pub delta_cond: f64,
    /// `δ_s · δ_{t|s} / δ_t`.
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSchedule {
    t_max: usize,
    interval: usize,
    alpha: Vec<f64>,
    delta: Vec<f64>,
    #[serde(skip)]
    per_step: Vec<StepCoefficients>,
}

impl BridgeSchedule {
    /// Default step count and sampling interval.
    pub const DEFAULT_T: usize = 1000;
    pub const DEFAULT_INTERVAL: usize = 100;

    pub fn new(t_max: usize, interval: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::invalid(format!("T must be >= 2, got {t_max}")));
        }
        if interval == 0 || !t_max.is_multiple_of(interval) {
            return Err(Error::invalid(format!(
                "sampling interval {interval} must divide T = {t_max}"
            )));
        }
        let alpha: Vec<f64> = (0..=t_max).map(|t| t as f64 / t_max as f64).collect();
        let delta: Vec<f64> = alpha.iter().map(|a| 2.0 * (a - a * a)).collect();
        let mut sched = Self {
            t_max,
            interval,
            alpha,
            delta,
            per_step: Vec::new(),
        };
        sched.per_step = (1..=t_max).map(|t| sched.pair(t, t - 1)).collect();
        Ok(sched)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::invalid(format!(
                "step {t} outside [0, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Visited steps `T, T−interval, …, 0`.
    pub fn sampling_steps(&self) -> Vec<usize> {
        (0..=self.t_max / self.interval)
            .rev()
            .map(|i| i * self.interval)
            .collect()
    }

    /// Number of reverse updates on the sampling grid.
    pub fn n_sampling_steps(&self) -> usize {
        self.t_max / self.interval
    }

    /// Coefficients for the single step `t → t−1`.
    pub fn step(&self, t: usize) -> Result<&StepCoefficients> {
        if t == 0 || t > self.t_max {
            return Err(Error::invalid(format!(
                "reverse step needs t in [1, {}], got {t}",
                self.t_max
            )));
        }
        Ok(&self.per_step[t - 1])
    }

    /// Coefficients for a jump `t → s` on a coarse grid.
    pub fn coefficients(&self, t: usize, s: usize) -> Result<StepCoefficients> {
        if s >= t || t > self.t_max {
            return Err(Error::invalid(format!(
                "need 0 <= s < t <= T, got t={t}, s={s}"
            )));
        }
        Ok(self.pair(t, s))
    }

    fn pair(&self, t: usize, s: usize) -> StepCoefficients {
        let (a_t, a_s) = (self.alpha[t], self.alpha[s]);
        let (d_t, d_s) = (self.delta[t], self.delta[s]);
        let k = (1.0 - a_t) / (1.0 - a_s);
        let delta_cond = d_t - d_s * k * k;
        if t == self.t_max {
            // δ_T = 0: use the continuous extension δ_s·k/δ_t → α_s/α_t.
            return StepCoefficients {
                t,
                s,
                c_x: 1.0,
                c_y: 0.0,
                c_e: 1.0 - a_s,
                delta_cond,
                var: d_s,
            };
        }
        let r = delta_cond / d_t;
        StepCoefficients {
            t,
            s,
            c_x: d_s / d_t * k + r * (1.0 - a_s),
            c_y: a_s - a_t * k * d_s / d_t,
            c_e: (1.0 - a_s) * r,
            delta_cond,
            var: d_s * r,
        }
    }

    /// Coarse-grid coefficients in visiting order.
    pub fn sampling_coefficients(&self) -> Vec<StepCoefficients> {
        let steps = self.sampling_steps();
        steps.windows(2).map(|w| self.pair(w[0], w[1])).collect()
    }
}
