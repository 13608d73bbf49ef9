//! Parallel-beam tomography on square axial slices.
//!
//! Geometry: pixel `(x, y)` sits at `(x - c, y - c)` with `c = (n - 1) / 2`.
//! The projection at angle θ integrates along direction `(-sin θ, cos θ)`;
//! detector coordinate `s = X cos θ + Y sin θ`, bin `j` centered at
//! `s = j - (B - 1) / 2`, bin spacing equal to the pixel spacing.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Projection counts the motion simulator samples from.
pub const ALLOWED_ANGLE_COUNTS: [usize; 5] = [180, 360, 540, 720, 1080];

/// Projection angles in degrees, strictly increasing in [0, 180).
#[derive(Clone, Debug, PartialEq)]
pub struct AngleSet {
    angles_deg: Vec<f64>,
}

impl AngleSet {
    /// `n` angles uniformly spaced over [0°, 180°).
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("angle count must be >= 1"));
        }
        Ok(Self {
            angles_deg: (0..n).map(|i| i as f64 * 180.0 / n as f64).collect(),
        })
    }

    pub fn from_degrees(angles_deg: Vec<f64>) -> Result<Self> {
        if angles_deg.is_empty() {
            return Err(Error::invalid("empty angle set"));
        }
        if angles_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("non-finite projection angle"));
        }
        if angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "projection angles must be strictly increasing",
            ));
        }
        Ok(Self { angles_deg })
    }

    pub fn len(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_deg.is_empty()
    }

    pub fn degrees(&self) -> &[f64] {
        &self.angles_deg
    }
}

/// Detector bins needed to cover the diagonal of an `n × n` slice.
pub fn detector_bins(n: usize) -> usize {
    (n as f64 * std::f64::consts::SQRT_2).ceil() as usize
}

/// One projection row per angle, `bins` detector values per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub n_angles: usize,
    pub bins: usize,
    /// Detector bin spacing (mm), equal to the in-plane pixel spacing.
    pub bin_spacing: f64,
    /// Row-major `[angle][bin]`.
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(n_angles: usize, bins: usize, bin_spacing: f64) -> Self {
        Self {
            n_angles,
            bins,
            bin_spacing,
            data: vec![0.0; n_angles * bins],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.bins..(i + 1) * self.bins]
    }
}

#[inline]
fn bilinear(img: &[f64], n: usize, x: f64, y: f64) -> f64 {
    if !(x > -1.0 && y > -1.0 && x < n as f64 && y < n as f64) {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= n as i64 || yi >= n as i64 {
            0.0
        } else {
            img[yi as usize * n + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn check_square(slice: &[f64], n: usize) -> Result<()> {
    if n == 0 || slice.len() != n * n {
        return Err(Error::invalid(format!(
            "slice of {} values is not {n} x {n}",
            slice.len()
        )));
    }
    Ok(())
}

/// Zero-pads a `w × h` image (w fastest) to a centered square.
pub fn pad_to_square(img: &[f64], w: usize, h: usize) -> (Vec<f64>, usize) {
    let n = w.max(h);
    let (ox, oy) = ((n - w) / 2, (n - h) / 2);
    let mut out = vec![0.0; n * n];
    for y in 0..h {
        out[(y + oy) * n + ox..(y + oy) * n + ox + w].copy_from_slice(&img[y * w..(y + 1) * w]);
    }
    (out, n)
}

/// Line integrals of an `n × n` slice at angle `theta_deg`: the slice is
/// resampled on a grid rotated by θ (bilinear) and summed along the ray
/// direction, times the pixel spacing. Returns [`detector_bins`]`(n)` values.
pub fn radon_project(slice: &[f64], n: usize, spacing: f64, theta_deg: f64) -> Result<Vec<f64>> {
    check_square(slice, n)?;
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in slice".into()));
    }
    let mut out = vec![0.0; detector_bins(n)];
    project_into(slice, n, spacing, theta_deg, &mut out);
    Ok(out)
}

/// Unchecked projection kernel; `out.len()` is the bin count.
pub(crate) fn project_into(slice: &[f64], n: usize, spacing: f64, theta_deg: f64, out: &mut [f64]) {
    let bins = out.len();
    let theta = theta_deg.to_radians();
    let (sn, cs) = theta.sin_cos();
    let c = (n as f64 - 1.0) / 2.0;
    let half = (bins as f64 - 1.0) / 2.0;
    // Ray samples only matter while the point is within the bilinear support
    // (-1, n) on both axes.
    for (j, o) in out.iter_mut().enumerate() {
        let s = j as f64 - half;
        let bx = c + s * cs;
        let by = c + s * sn;
        let (mut lo, mut hi) = (-half, half);
        clip_range(bx, -sn, n, &mut lo, &mut hi);
        clip_range(by, cs, n, &mut lo, &mut hi);
        if lo > hi {
            *o = 0.0;
            continue;
        }
        let k0 = (lo + half).ceil().max(0.0) as usize;
        let k1 = ((hi + half).floor() as usize).min(bins - 1);
        let mut acc = 0.0;
        for k in k0..=k1 {
            let u = k as f64 - half;
            acc += bilinear(slice, n, bx - u * sn, by + u * cs);
        }
        *o = acc * spacing;
    }
}

/// Narrows `[lo, hi]` to the `u` with `-1 < base + u * dir < n`.
fn clip_range(base: f64, dir: f64, n: usize, lo: &mut f64, hi: &mut f64) {
    let (a, b) = (-1.0, n as f64);
    if dir.abs() < 1e-12 {
        if !(base > a && base < b) {
            *lo = 1.0;
            *hi = 0.0;
        }
        return;
    }
    let t1 = (a - base) / dir;
    let t2 = (b - base) / dir;
    let (tmin, tmax) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
    *lo = lo.max(tmin);
    *hi = hi.min(tmax);
}

/// Full sinogram of one slice.
pub fn radon_full(slice: &[f64], n: usize, spacing: f64, angles: &AngleSet) -> Result<Sinogram> {
    check_square(slice, n)?;
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in slice".into()));
    }
    let mut s = Sinogram::zeros(angles.len(), detector_bins(n), spacing);
    for (i, &a) in angles.degrees().iter().enumerate() {
        project_into(slice, n, spacing, a, s.row_mut(i));
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RampWindow {
    /// Plain Ram-Lak ramp.
    #[default]
    RamLak,
    /// Ramp multiplied by a Hann window reaching zero at Nyquist.
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbpOptions {
    pub window: RampWindow,
    /// Value assigned outside the inscribed reconstruction circle.
    pub outside_value: f64,
}

impl Default for FbpOptions {
    fn default() -> Self {
        Self {
            window: RampWindow::RamLak,
            outside_value: 0.0,
        }
    }
}

/// Frequency response of the discrete ramp filter (spatial kernel
/// `h[0] = 1/2`, `h[odd] = -2 / (π n)²`) on a length-`len` FFT grid.
fn ramp_response(len: usize, window: RampWindow, fft: &Arc<dyn Fft<f64>>) -> Vec<f64> {
    let mut h = vec![Complex::new(0.0, 0.0); len];
    h[0].re = 0.5;
    for k in 1..len / 2 {
        if k % 2 == 1 {
            let v = -2.0 / (PI * PI * (k * k) as f64);
            h[k].re = v;
            h[len - k].re = v;
        }
    }
    fft.process(&mut h);
    h.iter()
        .enumerate()
        .map(|(i, c)| {
            let f = if i <= len / 2 { i } else { len - i } as f64 / len as f64;
            let w = match window {
                RampWindow::RamLak => 1.0,
                RampWindow::Hann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
            };
            c.re * w
        })
        .collect()
}

/// Ramp-filters every row of a sinogram (frequency domain, zero padded).
pub fn filter_sinogram(s: &Sinogram, window: RampWindow) -> Sinogram {
    let len = (2 * s.bins).max(64).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let resp = ramp_response(len, window, &fwd);
    let mut out = Sinogram::zeros(s.n_angles, s.bins, s.bin_spacing);
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    let scale = 1.0 / (len as f64 * s.bin_spacing);
    for i in 0..s.n_angles {
        for (b, v) in buf.iter_mut().enumerate() {
            *v = Complex::new(if b < s.bins { s.row(i)[b] } else { 0.0 }, 0.0);
        }
        fwd.process(&mut buf);
        for (v, r) in buf.iter_mut().zip(&resp) {
            *v *= *r;
        }
        inv.process(&mut buf);
        for (o, v) in out.row_mut(i).iter_mut().zip(&buf) {
            *o = v.re * scale;
        }
    }
    out
}

/// Filtered back-projection onto an `n × n` slice.
pub fn fbp(s: &Sinogram, angles: &AngleSet, n: usize, opts: &FbpOptions) -> Result<Vec<f64>> {
    if angles.len() < 2 {
        return Err(Error::invalid(
            "filtered back-projection needs at least 2 angles",
        ));
    }
    if s.n_angles != angles.len() || s.data.len() != s.n_angles * s.bins {
        return Err(Error::invalid(format!(
            "sinogram has {} rows, angle set has {}",
            s.n_angles,
            angles.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("output size must be >= 1"));
    }
    let q = filter_sinogram(s, opts.window);
    let c = (n as f64 - 1.0) / 2.0;
    let half = (s.bins as f64 - 1.0) / 2.0;
    let mut img = vec![0.0; n * n];
    for (i, &a) in angles.degrees().iter().enumerate() {
        let (sn, cs) = a.to_radians().sin_cos();
        let row = q.row(i);
        for y in 0..n {
            let yy = y as f64 - c;
            let base = yy * sn + half;
            let line = &mut img[y * n..(y + 1) * n];
            for (x, px) in line.iter_mut().enumerate() {
                let t = (x as f64 - c) * cs + base;
                let t0 = t.floor();
                let j = t0 as i64;
                if j < -1 || j >= s.bins as i64 {
                    continue;
                }
                let f = t - t0;
                let lo = if j >= 0 { row[j as usize] } else { 0.0 };
                let hi = if j + 1 < s.bins as i64 {
                    row[(j + 1) as usize]
                } else {
                    0.0
                };
                *px += lo * (1.0 - f) + hi * f;
            }
        }
    }
    let scale = PI / (2.0 * angles.len() as f64);
    let r2 = (n as f64 / 2.0).powi(2);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let p = &mut img[y * n + x];
            *p = if dx * dx + dy * dy <= r2 {
                *p * scale
            } else {
                opts.outside_value
            };
        }
    }
    Ok(img)
}

/// Whether pixel `(x, y)` of an `n × n` slice lies inside the reconstruction circle.
pub fn inside_circle(n: usize, x: usize, y: usize) -> bool {
    let c = (n as f64 - 1.0) / 2.0;
    let (dx, dy) = (x as f64 - c, y as f64 - c);
    dx * dx + dy * dy <= (n as f64 / 2.0).powi(2)
}

/// Resamples a slice so that `out(p) = in(R_φ p)` about the slice center
/// (bilinear, zero outside). Projecting the result at θ matches projecting
/// the input at θ + φ.
pub fn rotate_slice(slice: &[f64], n: usize, phi_deg: f64) -> Vec<f64> {
    let (sn, cs) = phi_deg.to_radians().sin_cos();
    let c = (n as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = c + dx * cs - dy * sn;
            let sy = c + dx * sn + dy * cs;
            out[y * n + x] = bilinear(slice, n, sx, sy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Supersampled indicator of a disk of radius `r` (pixels) at the slice center.
    pub(crate) fn disk(n: usize, r: f64) -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let ss = 8;
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut hit = 0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64 - c;
                        let py = y as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64 - c;
                        if px * px + py * py <= r * r {
                            hit += 1;
                        }
                    }
                }
                out[y * n + x] = hit as f64 / (ss * ss) as f64;
            }
        }
        out
    }

    fn gaussian_blob(n: usize, cx: f64, cy: f64, sigma: f64) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                out[y * n + x] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        out
    }

    #[test]
    fn angle_set_validation() {
        let a = AngleSet::uniform(4).unwrap();
        assert_eq!(a.degrees(), &[0.0, 45.0, 90.0, 135.0]);
        assert!(AngleSet::from_degrees(vec![0.0, 0.0]).is_err());
        assert!(AngleSet::uniform(0).is_err());
        assert_eq!(detector_bins(64), 91);
    }

    #[test]
    fn disk_chord_profile() {
        let n = 64;
        let r = 20.0;
        let img = disk(n, r);
        for theta in [0.0, 17.0, 45.0, 90.0, 133.0] {
            let p = radon_project(&img, n, 1.0, theta).unwrap();
            let half = (p.len() as f64 - 1.0) / 2.0;
            let at = |s: f64| {
                let t = s + half;
                let j = t.floor() as usize;
                let f = t - j as f64;
                p[j] * (1.0 - f) + p[j + 1] * f
            };
            for s in [0.0, r / 2.0] {
                let expect = 2.0 * (r * r - s * s).sqrt();
                let got = at(s);
                assert!(
                    (got - expect).abs() / expect < 0.03,
                    "theta {theta} s {s}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn zero_slice_and_non_finite() {
        let z = vec![0.0; 16 * 16];
        assert!(radon_project(&z, 16, 1.0, 30.0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let mut bad = z.clone();
        bad[3] = f64::NAN;
        assert!(radon_project(&bad, 16, 1.0, 30.0).is_err());
        assert!(radon_project(&z, 15, 1.0, 30.0).is_err());
    }

    #[test]
    fn projection_conserves_mass() {
        let n = 48;
        let img = gaussian_blob(n, 20.0, 26.0, 5.0);
        let total: f64 = img.iter().sum::<f64>() * 0.7;
        for theta in [0.0, 10.0, 33.3, 60.0, 90.0, 145.0] {
            let p = radon_project(&img, n, 0.7, theta).unwrap();
            let s: f64 = p.iter().sum();
            assert!(
                (s - total).abs() / total < 1e-3,
                "theta {theta}: {s} vs {total}"
            );
        }
    }

    #[test]
    fn projection_is_linear() {
        let n = 32;
        let a = gaussian_blob(n, 12.0, 14.0, 3.0);
        let b = disk(n, 9.0);
        let comb: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
        let pa = radon_project(&a, n, 1.0, 27.0).unwrap();
        let pb = radon_project(&b, n, 1.0, 27.0).unwrap();
        let pc = radon_project(&comb, n, 1.0, 27.0).unwrap();
        for i in 0..pa.len() {
            assert!((pc[i] - (2.0 * pa[i] - 3.0 * pb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn rotational_consistency() {
        let n = 64;
        let img = gaussian_blob(n, 27.0, 35.0, 6.0);
        let c = (n as f64 - 1.0) / 2.0;
        for (theta, phi) in [(10.0, 90.0), (20.0, 30.0), (100.0, 45.0), (5.0, -70.0)] {
            // A Gaussian rotates exactly by moving its center; the 90° case
            // also goes through rotate_slice, which is exact there.
            let (sn, cs) = f64::to_radians(phi).sin_cos();
            let (dx, dy) = (27.0 - c, 35.0 - c);
            let rotated = if phi == 90.0 {
                rotate_slice(&img, n, phi)
            } else {
                gaussian_blob(n, c + dx * cs + dy * sn, c - dx * sn + dy * cs, 6.0)
            };
            let a = radon_project(&rotated, n, 1.0, theta).unwrap();
            let b = radon_project(&img, n, 1.0, theta + phi).unwrap();
            let num: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            assert!(num / den < 1e-3, "theta {theta} phi {phi}: {}", num / den);
        }
    }

    fn rel_l2_in_circle(rec: &[f64], truth: &[f64], n: usize) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                if inside_circle(n, x, y) {
                    let i = y * n + x;
                    num += (rec[i] - truth[i]).powi(2);
                    den += truth[i].powi(2);
                }
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn fbp_roundtrip_smooth_phantom() {
        let n = 64;
        let mut img = gaussian_blob(n, 30.0, 34.0, 9.0);
        for (v, b) in img.iter_mut().zip(gaussian_blob(n, 40.0, 24.0, 4.0)) {
            *v = 100.0 * *v + 300.0 * b;
        }
        for spacing in [1.0, 0.7] {
            let angles = AngleSet::uniform(360).unwrap();
            let s = radon_full(&img, n, spacing, &angles).unwrap();
            let rec = fbp(&s, &angles, n, &FbpOptions::default()).unwrap();
            let e = rel_l2_in_circle(&rec, &img, n);
            assert!(e < 0.05, "spacing {spacing}: {e}");
        }
    }

    #[test]
    fn fbp_zero_and_linear() {
        let n = 24;
        let angles = AngleSet::uniform(30).unwrap();
        let z = Sinogram::zeros(30, detector_bins(n), 1.0);
        assert!(fbp(&z, &angles, n, &FbpOptions::default())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let s1 = radon_full(&gaussian_blob(n, 10.0, 12.0, 3.0), n, 1.0, &angles).unwrap();
        let s2 = radon_full(&disk(n, 6.0), n, 1.0, &angles).unwrap();
        let mut s3 = s1.clone();
        for (o, (a, b)) in s3.data.iter_mut().zip(s1.data.iter().zip(&s2.data)) {
            *o = 1.5 * a - 0.25 * b;
        }
        for window in [RampWindow::RamLak, RampWindow::Hann] {
            let opts = FbpOptions {
                window,
                outside_value: 0.0,
            };
            let r1 = fbp(&s1, &angles, n, &opts).unwrap();
            let r2 = fbp(&s2, &angles, n, &opts).unwrap();
            let r3 = fbp(&s3, &angles, n, &opts).unwrap();
            for i in 0..r1.len() {
                assert!((r3[i] - (1.5 * r1[i] - 0.25 * r2[i])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fbp_rejects_bad_input() {
        let one = AngleSet::uniform(1).unwrap();
        let s = Sinogram::zeros(1, detector_bins(8), 1.0);
        assert!(fbp(&s, &one, 8, &FbpOptions::default()).is_err());
        let two = AngleSet::uniform(2).unwrap();
        assert!(fbp(&s, &two, 8, &FbpOptions::default()).is_err());
    }

    #[test]
    fn outside_circle_gets_fill_value() {
        let n = 16;
        let angles = AngleSet::uniform(20).unwrap();
        let s = Sinogram::zeros(20, detector_bins(n), 1.0);
        let rec = fbp(
            &s,
            &angles,
            n,
            &FbpOptions {
                window: RampWindow::RamLak,
                outside_value: -1000.0,
            },
        )
        .unwrap();
        assert_eq!(rec[0], -1000.0);
        assert_eq!(rec[n * n / 2 + n / 2], 0.0);
    }
}
