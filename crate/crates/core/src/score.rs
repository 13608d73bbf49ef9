//! Calcium quantification and evaluation metrics.
//!
//! Agatston follows the standard clinical rule: per axial slice, 8-connected
//! components of voxels at or above 130 HU with area of at least 1 mm², each
//! scored as area × a weight picked by the component's peak HU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{label_slice_8, BinaryMask, VoxelGrid};

pub const CALCIUM_THRESHOLD_HU: f64 = 130.0;
pub const DEFAULT_TAU: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMaskParams {
    pub threshold: f64,
    pub tau: f64,
}

impl Default for SoftMaskParams {
    fn default() -> Self {
        Self {
            threshold: CALCIUM_THRESHOLD_HU,
            tau: DEFAULT_TAU,
        }
    }
}

impl SoftMaskParams {
    pub fn with_tau(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!(
                "softness tau must be positive, got {tau}"
            )));
        }
        Ok(Self {
            tau,
            ..Self::default()
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `σ((x − 130)/τ)`.
pub fn soft_mask(x: f64, tau: f64) -> f64 {
    sigmoid((x - CALCIUM_THRESHOLD_HU) / tau)
}

/// `d/dx σ((x − 130)/τ) = σ(1 − σ)/τ`.
pub fn soft_mask_derivative(x: f64, tau: f64) -> f64 {
    let s = soft_mask(x, tau);
    s * (1.0 - s) / tau
}

/// `S_vol = v_voxel · Σ σ((x_i − 130)/τ)` over raw HU values.
pub fn volume_score_values(values: &[f64], voxel_volume: f64, tau: f64) -> f64 {
    voxel_volume * values.iter().map(|&x| soft_mask(x, tau)).sum::<f64>()
}

pub fn volume_score(v: &VoxelGrid, tau: f64) -> Result<f64> {
    SoftMaskParams::with_tau(tau)?;
    Ok(volume_score_values(v.values(), v.voxel_volume(), tau))
}

/// Gradient of [`volume_score_values`] with respect to every voxel.
pub fn volume_score_grad(values: &[f64], voxel_volume: f64, tau: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&x| voxel_volume * soft_mask_derivative(x, tau))
        .collect()
}

/// `(log(1 + S(x̂₀)) − log(1 + S(x₀)))²` and its gradient with respect to x̂₀.
/// Both inputs are HU values on the same voxel geometry.
pub fn calcium_consistency_loss(
    x0: &[f64],
    x0_hat: &[f64],
    voxel_volume: f64,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if x0.len() != x0_hat.len() {
        return Err(Error::invalid(format!(
            "consistency loss inputs differ in length: {} vs {}",
            x0.len(),
            x0_hat.len()
        )));
    }
    SoftMaskParams::with_tau(tau)?;
    let s_ref = volume_score_values(x0, voxel_volume, tau);
    let s_hat = volume_score_values(x0_hat, voxel_volume, tau);
    let diff = (1.0 + s_hat).ln() - (1.0 + s_ref).ln();
    let outer = 2.0 * diff / (1.0 + s_hat);
    let grad = x0_hat
        .iter()
        .map(|&x| outer * voxel_volume * soft_mask_derivative(x, tau))
        .collect();
    Ok((diff * diff, grad))
}

/// Five-category risk stratification of an Agatston score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    None,
    Minimal,
    Mild,
    Moderate,
    Severe,
}

impl Grade {
    pub const ALL: [Grade; 5] = [
        Grade::None,
        Grade::Minimal,
        Grade::Mild,
        Grade::Moderate,
        Grade::Severe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Grade::None => "No calcification",
            Grade::Minimal => "Minimal",
            Grade::Mild => "Mild",
            Grade::Moderate => "Moderate",
            Grade::Severe => "Severe",
        }
    }
}

/// 0 → none; (0,10] minimal; (10,100] mild; (100,400] moderate; >400 severe.
pub fn grade(score: f64) -> Result<Grade> {
    if score.is_nan() || score < 0.0 {
        return Err(Error::invalid(format!(
            "Agatston score must be non-negative, got {score}"
        )));
    }
    Ok(if score == 0.0 {
        Grade::None
    } else if score <= 10.0 {
        Grade::Minimal
    } else if score <= 100.0 {
        Grade::Mild
    } else if score <= 400.0 {
        Grade::Moderate
    } else {
        Grade::Severe
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgatstonParams {
    pub threshold_hu: f64,
    pub min_area_mm2: f64,
    /// Lower HU bounds of weights 2, 3 and 4.
    pub weight_bounds: [f64; 3],
}

impl Default for AgatstonParams {
    fn default() -> Self {
        Self {
            threshold_hu: CALCIUM_THRESHOLD_HU,
            min_area_mm2: 1.0,
            weight_bounds: [200.0, 300.0, 400.0],
        }
    }
}

impl AgatstonParams {
    pub fn weight(&self, max_hu: f64) -> f64 {
        1.0 + self.weight_bounds.iter().filter(|&&b| max_hu >= b).count() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub slice: usize,
    /// In-slice voxel indices (`x + nx·y`).
    pub voxels: Vec<usize>,
    pub area_mm2: f64,
    pub max_hu: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub agatston: f64,
    pub volume_mm3: f64,
    pub grade: Grade,
    pub lesions: Vec<Lesion>,
}

pub fn agatston(v: &VoxelGrid) -> Result<ScoreReport> {
    agatston_with(v, &AgatstonParams::default(), DEFAULT_TAU)
}

pub fn agatston_with(v: &VoxelGrid, params: &AgatstonParams, tau: f64) -> Result<ScoreReport> {
    let [sx, sy, _] = v.spacing();
    if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
        return Err(Error::invalid(
            "in-plane spacing must be known and positive",
        ));
    }
    let [nx, ny, nz] = v.dims();
    let pixel_area = sx * sy;
    let mut lesions = Vec::new();
    for z in 0..nz {
        let slice = v.slice(z);
        let bits: Vec<bool> = slice.iter().map(|&x| x >= params.threshold_hu).collect();
        for voxels in label_slice_8(&bits, nx, ny) {
            let area = voxels.len() as f64 * pixel_area;
            if area < params.min_area_mm2 {
                continue;
            }
            let max_hu = voxels.iter().map(|&i| slice[i]).fold(f64::MIN, f64::max);
            lesions.push(Lesion {
                slice: z,
                score: area * params.weight(max_hu),
                voxels,
                area_mm2: area,
                max_hu,
            });
        }
    }
    let total: f64 = lesions.iter().map(|l| l.score).sum();
    Ok(ScoreReport {
        agatston: total,
        volume_mm3: volume_score(v, tau)?,
        grade: grade(total)?,
        lesions,
    })
}

/// `1 − 2|P∩R|/(|P|+|R|)`, zero when both masks are empty.
pub fn dice_loss_masks(p: &BinaryMask, r: &BinaryMask) -> Result<f64> {
    if p.dims() != r.dims() {
        return Err(Error::invalid(format!(
            "mask dims differ: {:?} vs {:?}",
            p.dims(),
            r.dims()
        )));
    }
    let (mut inter, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.bits().iter().zip(r.bits()) {
        np += a as usize;
        nr += b as usize;
        inter += (a && b) as usize;
    }
    if np + nr == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter as f64 / (np + nr) as f64)
}

/// Dice loss of `pred` binarized at 130 HU against a reference mask.
pub fn dice_loss(pred: &VoxelGrid, reference: &BinaryMask) -> Result<f64> {
    dice_loss_masks(
        &BinaryMask::threshold(pred, CALCIUM_THRESHOLD_HU),
        reference,
    )
}

/// Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "Pearson needs two equal-length vectors of at least 2 values",
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub pred_agatston: f64,
    pub truth_agatston: f64,
    pub pred_grade: Grade,
    pub truth_grade: Grade,
    pub dice_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub grade: Grade,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub agatston_mae: f64,
    pub grade_accuracy_pct: f64,
    pub mean_dice_loss: f64,
    /// `None` (JSON null) when a score vector has zero variance.
    pub pearson: Option<f64>,
    pub pearson_undefined: bool,
    /// Rows are true grades, columns predicted grades.
    pub confusion_counts: [[usize; 5]; 5],
    /// Row-normalized percentages; rows without cases are all zero.
    pub confusion_pct: [[f64; 5]; 5],
    pub per_class: Vec<ClassMetrics>,
    pub cases: Vec<CaseScores>,
}

/// Scores one (prediction, truth) pair; the Dice reference is `truth`
/// binarized at 130 HU unless an explicit mask is given.
pub fn score_case(
    pred: &VoxelGrid,
    truth: &VoxelGrid,
    mask: Option<&BinaryMask>,
) -> Result<CaseScores> {
    if !pred.same_geometry(truth) {
        return Err(Error::invalid(
            "prediction and truth volumes differ in geometry",
        ));
    }
    let p = agatston(pred)?;
    let t = agatston(truth)?;
    let reference = match mask {
        Some(m) => m.clone(),
        None => BinaryMask::threshold(truth, CALCIUM_THRESHOLD_HU),
    };
    Ok(CaseScores {
        pred_agatston: p.agatston,
        truth_agatston: t.agatston,
        pred_grade: p.grade,
        truth_grade: t.grade,
        dice_loss: dice_loss(pred, &reference)?,
    })
}

pub fn evaluate(pairs: &[(VoxelGrid, VoxelGrid)]) -> Result<EvalReport> {
    let cases = pairs
        .iter()
        .map(|(p, t)| score_case(p, t, None))
        .collect::<Result<Vec<_>>>()?;
    evaluate_cases(cases)
}

/// Aggregates per-case scores into the dataset-level report.
pub fn evaluate_cases(cases: Vec<CaseScores>) -> Result<EvalReport> {
    if cases.len() < 2 {
        return Err(Error::invalid("evaluation needs at least 2 cases"));
    }
    let n = cases.len() as f64;
    let pred: Vec<f64> = cases.iter().map(|c| c.pred_agatston).collect();
    let truth: Vec<f64> = cases.iter().map(|c| c.truth_agatston).collect();
    let mae = pred
        .iter()
        .zip(&truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let correct = cases
        .iter()
        .filter(|c| c.pred_grade == c.truth_grade)
        .count();
    let mean_dice = cases.iter().map(|c| c.dice_loss).sum::<f64>() / n;
    let r = pearson(&pred, &truth)?;

    let mut counts = [[0usize; 5]; 5];
    for c in &cases {
        counts[c.truth_grade.index()][c.pred_grade.index()] += 1;
    }
    let mut pct = [[0.0; 5]; 5];
    for (row, out) in counts.iter().zip(pct.iter_mut()) {
        let total: usize = row.iter().sum();
        if total > 0 {
            for (o, &c) in out.iter_mut().zip(row) {
                *o = 100.0 * c as f64 / total as f64;
            }
        }
    }
    let per_class = Grade::ALL
        .iter()
        .map(|&g| {
            let k = g.index();
            let tp = counts[k][k] as f64;
            let predicted: usize = counts.iter().map(|row| row[k]).sum();
            let support: usize = counts[k].iter().sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if support > 0 {
                tp / support as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                grade: g,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    Ok(EvalReport {
        n_cases: cases.len(),
        agatston_mae: mae,
        grade_accuracy_pct: 100.0 * correct as f64 / n,
        mean_dice_loss: mean_dice,
        pearson: r,
        pearson_undefined: r.is_none(),
        confusion_counts: counts,
        confusion_pct: pct,
        per_class,
        cases,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: headline metrics, per-grade block, confusion matrix.
    pub fn to_text_table(&self) -> String {
        let mut s = String::new();
        let r = match self.pearson {
            Some(r) => format!("{r:.3}"),
            None => "n/a".into(),
        };
        let _ = writeln!(
            s,
            "{:<14} {:>14} {:>12} {:>8}",
            "Agatston MAE", "Grade acc. (%)", "Dice loss", "Pearson"
        );
        let _ = writeln!(
            s,
            "{:<14.3} {:>14.3} {:>12.3} {:>8}",
            self.agatston_mae, self.grade_accuracy_pct, self.mean_dice_loss, r
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>7} {:>7} {:>8}",
            "Grade", "Prec", "Rec", "F1", "Support"
        );
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<18} {:>7.3} {:>7.3} {:>7.3} {:>8}",
                c.grade.label(),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<18}", "true \\ pred (%)");
        for g in Grade::ALL {
            let _ = write!(s, " {:>9}", short_label(g));
        }
        let _ = writeln!(s);
        for g in Grade::ALL {
            let _ = write!(s, "{:<18}", g.label());
            for v in self.confusion_pct[g.index()] {
                let _ = write!(s, " {v:>9.1}");
            }
            let _ = writeln!(s);
        }
        s
    }
}

fn short_label(g: Grade) -> &'static str {
    match g {
        Grade::None => "None",
        other => other.label(),
    }
}
