use crate::error::{Error, Result};
use crate::grid::{window_at, NormalizedGrid, Patch};

/// `ε̂ = f(x_t, y, t)`: both inputs are `k × H × W` windows and the output has
/// the shape of `x_t`.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    /// Window depth the denoiser was built for, if it is fixed.
    fn window_depth(&self) -> Option<usize> {
        None
    }

    fn predict(&self, xt: &Patch, y: &Patch, t: usize) -> Result<Patch>;
}

/// A denoiser with a flat parameter vector and a hand-written backward pass.
pub trait TrainableDenoiser: Denoiser {
    /// Whatever the backward pass needs from the forward pass.
    type Cache;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn forward_cached(&self, xt: &Patch, y: &Patch, t: usize) -> Result<(Patch, Self::Cache)>;

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂ε̂`.
    fn backward(&self, cache: &Self::Cache, d_out: &Patch, grad: &mut [f64]);
}

pub(crate) fn check_pair(xt: &Patch, y: &Patch) -> Result<()> {
    if !xt.same_shape(y) {
        return Err(Error::invalid(format!(
            "x_t window {:?} and y window {:?} differ",
            xt.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Predicts zero noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn name(&self) -> &str {
        "identity"
    }

    fn predict(&self, xt: &Patch, y: &Patch, _t: usize) -> Result<Patch> {
        check_pair(xt, y)?;
        Ok(Patch::zeros(xt.k, xt.h, xt.w))
    }
}

/// Knows the clean window and returns the exact noise `x_t − x₀`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub x0: Patch,
}

impl Denoiser for OracleDenoiser {
    fn name(&self) -> &str {
        "oracle"
    }

    fn window_depth(&self) -> Option<usize> {
        Some(self.x0.k)
    }

    fn predict(&self, xt: &Patch, y: &Patch, _t: usize) -> Result<Patch> {
        check_pair(xt, y)?;
        if !xt.same_shape(&self.x0) {
            return Err(Error::invalid("oracle window shape mismatch"));
        }
        Ok(xt.zip_map(&self.x0, |a, b| a - b))
    }
}

impl OracleDenoiser {
    /// Oracle for the window of a clean volume centered at slice `center`.
    pub fn for_window(clean: &NormalizedGrid, center: usize, k: usize) -> Self {
        Self {
            x0: window_at(clean.values(), clean.dims(), center, k),
        }
    }
}

/// `ε̂ = a·x_t + b·y` per voxel: two parameters, used for gradient checks.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDenoiser {
    pub theta: [f64; 2],
}

impl LinearDenoiser {
    pub fn new(a: f64, b: f64) -> Self {
        Self { theta: [a, b] }
    }
}

impl Denoiser for LinearDenoiser {
    fn name(&self) -> &str {
        "linear"
    }

    fn predict(&self, xt: &Patch, y: &Patch, _t: usize) -> Result<Patch> {
        check_pair(xt, y)?;
        let [a, b] = self.theta;
        Ok(xt.zip_map(y, |x, v| a * x + b * v))
    }
}

impl TrainableDenoiser for LinearDenoiser {
    type Cache = (Patch, Patch);

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn forward_cached(&self, xt: &Patch, y: &Patch, t: usize) -> Result<(Patch, Self::Cache)> {
        Ok((self.predict(xt, y, t)?, (xt.clone(), y.clone())))
    }

    fn backward(&self, cache: &Self::Cache, d_out: &Patch, grad: &mut [f64]) {
        let (xt, y) = cache;
        for ((g, x), v) in d_out.data.iter().zip(&xt.data).zip(&y.data) {
            grad[0] += g * x;
            grad[1] += g * v;
        }
    }
}
