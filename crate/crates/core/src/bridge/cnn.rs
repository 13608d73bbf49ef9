//! Small residual convolutional noise predictor with a hand-written backward pass.
//!
//! ```text
//! in  (2k ch: x_t slices, y slices) ── conv3x3 ─ + b + W_t·emb(t) ─ SiLU ─ h₀
//! h_{l+1} = h_l + SiLU(conv3x3_dil(h_l) + b_l)        l = 0..layers
//! out (k ch) = conv3x3(h_L) + b + (x_t − y)
//! ```
//! The fixed `x_t − y` skip means an untrained head already predicts
//! `x̂₀ = y`, so training only has to learn the correction.
//! Convolutions use zero padding; all arithmetic is `f64`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::denoiser::{check_pair, Denoiser, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::grid::Patch;
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    /// Window depth (slices in and out).
    pub k: usize,
    pub width: usize,
    /// Dilation of each residual layer; its length is the residual depth.
    pub dilations: Vec<usize>,
    /// Sinusoidal timestep embedding size (even).
    pub emb_dim: usize,
    /// Diffusion step count used to scale the embedding.
    pub t_max: usize,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            k: 3,
            width: 16,
            dilations: vec![1, 2],
            emb_dim: 16,
            t_max: 1000,
            seed: 0,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "window depth k must be odd, got {}",
                self.k
            )));
        }
        if self.width == 0 {
            return Err(Error::invalid("width must be >= 1"));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 == 1 {
            return Err(Error::invalid(
                "embedding size must be a positive even number",
            ));
        }
        if self.dilations.contains(&0) {
            return Err(Error::invalid("dilations must be >= 1"));
        }
        if self.t_max == 0 {
            return Err(Error::invalid("t_max must be >= 1"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (c, k, e) = (self.width, self.k, self.emb_dim);
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let w_in = take(c * 2 * k * 9);
        let b_in = take(c);
        let w_t = take(c * e);
        let res = self
            .dilations
            .iter()
            .map(|_| (take(c * c * 9), take(c)))
            .collect();
        let w_out = take(k * c * 9);
        let b_out = take(k);
        Layout {
            w_in,
            b_in,
            w_t,
            res,
            w_out,
            b_out,
            total: off,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }
}

type Range = std::ops::Range<usize>;

#[derive(Clone, Debug)]
struct Layout {
    w_in: Range,
    b_in: Range,
    w_t: Range,
    res: Vec<(Range, Range)>,
    w_out: Range,
    b_out: Range,
    total: usize,
}

#[derive(Clone, Debug)]
pub struct TinyDenoiser {
    cfg: CnnConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CnnCache {
    h: usize,
    w: usize,
    input: Vec<f64>,
    emb: Vec<f64>,
    /// Pre-activation of the input layer.
    a0: Vec<f64>,
    /// `hs[l]` is the input of residual layer `l`; the last entry feeds the output conv.
    hs: Vec<Vec<f64>>,
    /// Pre-activations of the residual layers.
    pre: Vec<Vec<f64>>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Valid output/input index window for a tap offset `d` on an axis of length `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

/// `out[o] += Σ_i w[o,i] ⋆ in[i]` (3×3 taps, dilation `dil`, zero padding).
fn conv_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dil: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            for tap in 0..9 {
                let wv = weight[(o * cin + i) * 9 + tap];
                let dy = (tap / 3) as isize - 1;
                let dx = (tap % 3) as isize - 1;
                let (dy, dx) = (dy * dil as isize, dx * dil as isize);
                let (y0, y1) = tap_range(dy, h);
                let (x0, x1) = tap_range(dx, w);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let d = &mut dst[y * w + x0..y * w + x1];
                    let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv_forward`]: accumulates into `d_in` (if given) and `d_w`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dil: usize,
    d_out: &[f64],
    mut d_in: Option<&mut [f64]>,
    d_w: &mut [f64],
) {
    let plane = h * w;
    for o in 0..cout {
        let g = &d_out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            for tap in 0..9 {
                let wi = (o * cin + i) * 9 + tap;
                let wv = weight[wi];
                let dy = ((tap / 3) as isize - 1) * dil as isize;
                let dx = ((tap % 3) as isize - 1) * dil as isize;
                let (y0, y1) = tap_range(dy, h);
                let (x0, x1) = tap_range(dx, w);
                if x0 >= x1 {
                    continue;
                }
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let gr = &g[y * w + x0..y * w + x1];
                    let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    if let Some(di) = d_in.as_deref_mut() {
                        let d =
                            &mut di[i * plane + sy * w + sx0..i * plane + sy * w + sx0 + (x1 - x0)];
                        for (a, b) in d.iter_mut().zip(gr) {
                            *a += wv * b;
                        }
                    }
                }
                d_w[wi] += acc;
            }
        }
    }
}

fn add_bias(buf: &mut [f64], bias: &[f64], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut buf[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad(d: &[f64], plane: usize, out: &mut [f64]) {
    for (c, g) in out.iter_mut().enumerate() {
        *g += d[c * plane..(c + 1) * plane].iter().sum::<f64>();
    }
}

impl TinyDenoiser {
    /// Scaled-normal initialization from `cfg.seed`.
    pub fn new(cfg: CnnConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let mut params = vec![0.0; layout.total];
        let mut rng = rng_from_seed(cfg.seed);
        let mut fill = |r: &Range, std: f64, params: &mut [f64]| {
            let n = Normal::new(0.0, std).expect("std is positive");
            for p in &mut params[r.clone()] {
                *p = n.sample(&mut rng);
            }
        };
        let c = cfg.width as f64;
        fill(
            &layout.w_in,
            (2.0 / (2.0 * cfg.k as f64 * 9.0)).sqrt(),
            &mut params,
        );
        fill(&layout.w_t, 0.1, &mut params);
        for (w, _) in &layout.res {
            fill(w, 0.5 * (2.0 / (c * 9.0)).sqrt(), &mut params);
        }
        fill(&layout.w_out, 0.1 * (1.0 / (c * 9.0)).sqrt(), &mut params);
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    /// Rebuilds a network from stored parameters.
    pub fn from_params(cfg: CnnConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        if params.len() != layout.total {
            return Err(Error::invalid(format!(
                "parameter blob has {} values, config needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    /// Sinusoidal embedding of `t/T` at geometric frequencies.
    pub fn embedding(&self, t: usize) -> Vec<f64> {
        let half = self.cfg.emb_dim / 2;
        let pos = 1000.0 * t as f64 / self.cfg.t_max as f64;
        let mut e = Vec::with_capacity(self.cfg.emb_dim);
        for j in 0..half {
            let freq = 1.0 / 10_000f64.powf(j as f64 / half as f64);
            e.push((pos * freq).sin());
        }
        for j in 0..half {
            let freq = 1.0 / 10_000f64.powf(j as f64 / half as f64);
            e.push((pos * freq).cos());
        }
        e
    }

    fn run(&self, xt: &Patch, y: &Patch, t: usize) -> Result<(Vec<f64>, CnnCache)> {
        check_pair(xt, y)?;
        if xt.k != self.cfg.k {
            return Err(Error::invalid(format!(
                "network expects {}-slice windows, got {}",
                self.cfg.k, xt.k
            )));
        }
        let (h, w, c, k) = (xt.h, xt.w, self.cfg.width, self.cfg.k);
        let plane = h * w;
        let p = &self.params;
        let l = &self.layout;

        let mut input = Vec::with_capacity(2 * k * plane);
        input.extend_from_slice(&xt.data);
        input.extend_from_slice(&y.data);

        let emb = self.embedding(t);
        let wt = &p[l.w_t.clone()];
        let b_in = &p[l.b_in.clone()];
        let shift: Vec<f64> = (0..c)
            .map(|ch| {
                b_in[ch]
                    + wt[ch * emb.len()..(ch + 1) * emb.len()]
                        .iter()
                        .zip(&emb)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let mut a0 = vec![0.0; c * plane];
        conv_forward(&input, 2 * k, h, w, &p[l.w_in.clone()], c, 1, &mut a0);
        add_bias(&mut a0, &shift, plane);
        let mut hs = vec![a0.iter().map(|&v| silu(v)).collect::<Vec<f64>>()];
        let mut pre = Vec::with_capacity(l.res.len());
        for ((wr, br), &dil) in l.res.iter().zip(&self.cfg.dilations) {
            let hin = hs.last().expect("nonempty");
            let mut a = vec![0.0; c * plane];
            conv_forward(hin, c, h, w, &p[wr.clone()], c, dil, &mut a);
            add_bias(&mut a, &p[br.clone()], plane);
            let next: Vec<f64> = hin.iter().zip(&a).map(|(x, v)| x + silu(*v)).collect();
            pre.push(a);
            hs.push(next);
        }
        let mut out = vec![0.0; k * plane];
        conv_forward(
            hs.last().expect("nonempty"),
            c,
            h,
            w,
            &p[l.w_out.clone()],
            k,
            1,
            &mut out,
        );
        add_bias(&mut out, &p[l.b_out.clone()], plane);
        // Fixed skip: with a zero head the network predicts x̂₀ = y.
        for ((o, a), b) in out.iter_mut().zip(&xt.data).zip(&y.data) {
            *o += a - b;
        }
        Ok((
            out,
            CnnCache {
                h,
                w,
                input,
                emb,
                a0,
                hs,
                pre,
            },
        ))
    }
}

impl Denoiser for TinyDenoiser {
    fn name(&self) -> &str {
        "tiny-cnn"
    }

    fn window_depth(&self) -> Option<usize> {
        Some(self.cfg.k)
    }

    fn predict(&self, xt: &Patch, y: &Patch, t: usize) -> Result<Patch> {
        let (out, _) = self.run(xt, y, t)?;
        Patch::from_vec(xt.k, xt.h, xt.w, out)
    }
}

impl TrainableDenoiser for TinyDenoiser {
    type Cache = CnnCache;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_cached(&self, xt: &Patch, y: &Patch, t: usize) -> Result<(Patch, CnnCache)> {
        let (out, cache) = self.run(xt, y, t)?;
        Ok((Patch::from_vec(xt.k, xt.h, xt.w, out)?, cache))
    }

    fn backward(&self, cache: &CnnCache, d_out: &Patch, grad: &mut [f64]) {
        let (h, w, c, k) = (cache.h, cache.w, self.cfg.width, self.cfg.k);
        let plane = h * w;
        let p = &self.params;
        let l = &self.layout;

        bias_grad(&d_out.data, plane, &mut grad[l.b_out.clone()]);
        let mut dh = vec![0.0; c * plane];
        let h_last = cache.hs.last().expect("nonempty");
        conv_backward(
            h_last,
            c,
            h,
            w,
            &p[l.w_out.clone()],
            k,
            1,
            &d_out.data,
            Some(&mut dh),
            &mut grad[l.w_out.clone()],
        );

        for (idx, ((wr, br), &dil)) in l.res.iter().zip(&self.cfg.dilations).enumerate().rev() {
            let a = &cache.pre[idx];
            let da: Vec<f64> = dh.iter().zip(a).map(|(g, v)| g * silu_grad(*v)).collect();
            bias_grad(&da, plane, &mut grad[br.clone()]);
            conv_backward(
                &cache.hs[idx],
                c,
                h,
                w,
                &p[wr.clone()],
                c,
                dil,
                &da,
                Some(&mut dh),
                &mut grad[wr.clone()],
            );
        }

        let da0: Vec<f64> = dh
            .iter()
            .zip(&cache.a0)
            .map(|(g, v)| g * silu_grad(*v))
            .collect();
        let mut dshift = vec![0.0; c];
        bias_grad(&da0, plane, &mut dshift);
        for (g, d) in grad[l.b_in.clone()].iter_mut().zip(&dshift) {
            *g += d;
        }
        let e = cache.emb.len();
        let gwt = &mut grad[l.w_t.clone()];
        for ch in 0..c {
            for j in 0..e {
                gwt[ch * e + j] += dshift[ch] * cache.emb[j];
            }
        }
        conv_backward(
            &cache.input,
            2 * k,
            h,
            w,
            &p[l.w_in.clone()],
            c,
            1,
            &da0,
            None,
            &mut grad[l.w_in.clone()],
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_patch(rng: &mut impl Rng, k: usize, h: usize, w: usize) -> Patch {
        Patch::from_vec(
            k,
            h,
            w,
            (0..k * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Loss `Σ g ⊙ f(θ)` for a fixed random `g`, so `∂L/∂ε̂ = g`.
    fn check_gradients(cfg: CnnConfig, h: usize, w: usize, seed: u64) -> f64 {
        let mut rng = rng_from_seed(seed);
        let mut net = TinyDenoiser::new(cfg.clone()).unwrap();
        // Spread parameters so every activation path is exercised.
        for p in net.params_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let xt = rand_patch(&mut rng, cfg.k, h, w);
        let y = rand_patch(&mut rng, cfg.k, h, w);
        let g = rand_patch(&mut rng, cfg.k, h, w);
        let t = rng.random_range(1..=cfg.t_max);
        let (_, cache) = net.forward_cached(&xt, &y, t).unwrap();
        let mut grad = vec![0.0; net.params().len()];
        net.backward(&cache, &g, &mut grad);
        let loss = |n: &TinyDenoiser| -> f64 {
            let o = n.predict(&xt, &y, t).unwrap();
            o.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let eps = 1e-5;
            let orig = net.params()[i];
            net.params_mut()[i] = orig + eps;
            let lp = loss(&net);
            net.params_mut()[i] = orig - eps;
            let lm = loss(&net);
            net.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn micro_config_gradients() {
        let cfg = CnnConfig {
            k: 1,
            width: 2,
            dilations: vec![1],
            emb_dim: 4,
            t_max: 10,
            seed: 1,
        };
        for seed in 0..3 {
            let err = check_gradients(cfg.clone(), 5, 6, seed);
            assert!(err <= 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn dilated_config_gradients() {
        let cfg = CnnConfig {
            k: 3,
            width: 3,
            dilations: vec![2, 1],
            emb_dim: 4,
            t_max: 100,
            seed: 2,
        };
        let err = check_gradients(cfg, 6, 5, 7);
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn shape_and_determinism() {
        let mut rng = rng_from_seed(5);
        for (k, h, w) in [(1, 3, 4), (3, 8, 8), (5, 7, 2)] {
            let cfg = CnnConfig {
                k,
                width: 4,
                ..CnnConfig::default()
            };
            let a = TinyDenoiser::new(cfg.clone()).unwrap();
            let b = TinyDenoiser::new(cfg).unwrap();
            let xt = rand_patch(&mut rng, k, h, w);
            let y = rand_patch(&mut rng, k, h, w);
            let pa = a.predict(&xt, &y, 17).unwrap();
            assert_eq!(pa.shape(), xt.shape());
            assert_eq!(pa, b.predict(&xt, &y, 17).unwrap());
        }
        let net = TinyDenoiser::new(CnnConfig::default()).unwrap();
        assert!(net
            .predict(&Patch::zeros(1, 4, 4), &Patch::zeros(1, 4, 4), 0)
            .is_err());
        assert!(TinyDenoiser::new(CnnConfig {
            k: 2,
            ..CnnConfig::default()
        })
        .is_err());
        let n = net.params().len();
        assert!(TinyDenoiser::from_params(CnnConfig::default(), vec![0.0; n - 1]).is_err());
    }
}
