//! Segmentation quality metrics (pixel accuracy, Dice, mean IoU) plus
//! score-distribution reports: per-family histograms split by label, a
//! histogram overlap coefficient, and AUROC for label discrimination.
//!
//! Conventions, chosen so a healthy slice with a correctly empty prediction
//! scores perfectly and disclosed in every report:
//! - Dice of two empty masks is 1.0.
//! - Per-class IoU is 1.0 when the class is absent from both masks; `miou`
//!   averages IoU over the background and lesion classes.

use crate::discrepancy::DiscrepancyScores;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("mask contains non-binary value {0}")]
    NonBinaryInput(u8),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score encountered")]
    NonFiniteScore,
}

/// Confusion-matrix pixel counts; lesion pixels are the positive class.
/// Accumulate across images for pooled-pixel metrics, or build one per pair.
#[derive(Debug, Default, Clone, Copy, Serialize, Deserialize)]
pub struct PixelTotals {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl PixelTotals {
    pub fn from_pair(
        pred: ArrayView2<'_, u8>,
        gt: ArrayView2<'_, u8>,
    ) -> Result<Self, MetricsError> {
        let mut t = Self::default();
        t.accumulate(pred, gt)?;
        Ok(t)
    }

    pub fn accumulate(
        &mut self,
        pred: ArrayView2<'_, u8>,
        gt: ArrayView2<'_, u8>,
    ) -> Result<(), MetricsError> {
        if pred.shape() != gt.shape() {
            return Err(MetricsError::ShapeMismatch {
                left: pred.shape().to_vec(),
                right: gt.shape().to_vec(),
            });
        }
        let mut add = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if p > 1 {
                return Err(MetricsError::NonBinaryInput(p));
            }
            if g > 1 {
                return Err(MetricsError::NonBinaryInput(g));
            }
            match (p, g) {
                (1, 1) => add.true_pos += 1,
                (1, 0) => add.false_pos += 1,
                (0, 1) => add.false_neg += 1,
                _ => add.true_neg += 1,
            }
        }
        self.true_pos += add.true_pos;
        self.false_pos += add.false_pos;
        self.false_neg += add.false_neg;
        self.true_neg += add.true_neg;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn pixel_accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.true_pos as f64 / denom as f64
        }
    }

    pub fn miou(&self) -> f64 {
        let lesion_union = self.true_pos + self.false_pos + self.false_neg;
        let lesion = if lesion_union == 0 {
            1.0
        } else {
            self.true_pos as f64 / lesion_union as f64
        };
        let bg_union = self.true_neg + self.false_pos + self.false_neg;
        let background = if bg_union == 0 {
            1.0
        } else {
            self.true_neg as f64 / bg_union as f64
        };
        (lesion + background) / 2.0
    }
}

/// Fraction of pixels where the two masks agree.
pub fn pixel_accuracy(
    pred: ArrayView2<'_, u8>,
    gt: ArrayView2<'_, u8>,
) -> Result<f64, MetricsError> {
    Ok(PixelTotals::from_pair(pred, gt)?.pixel_accuracy())
}

/// `2|pred ∩ gt| / (|pred| + |gt|)` over lesion pixels; 1.0 when both empty.
pub fn dice(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64, MetricsError> {
    Ok(PixelTotals::from_pair(pred, gt)?.dice())
}

/// Mean of background IoU and lesion IoU (absent-from-both class scores 1.0).
pub fn miou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64, MetricsError> {
    Ok(PixelTotals::from_pair(pred, gt)?.miou())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dice: f64,
    pub miou: f64,
    pub pa: f64,
}

pub fn score_pair(
    pred: ArrayView2<'_, u8>,
    gt: ArrayView2<'_, u8>,
) -> Result<SegScores, MetricsError> {
    let t = PixelTotals::from_pair(pred, gt)?;
    Ok(SegScores {
        dice: t.dice(),
        miou: t.miou(),
        pa: t.pixel_accuracy(),
    })
}

/// Mean and spread of per-image scores. `std` is the sample standard
/// deviation (n−1 denominator); it is 0 for a single image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegAggregate {
    pub mean: SegScores,
    pub std: SegScores,
    pub n: usize,
}

pub fn aggregate(scores: &[SegScores]) -> Result<SegAggregate, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput("no scores to aggregate"));
    }
    let n = scores.len() as f64;
    let mean = SegScores {
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
        miou: scores.iter().map(|s| s.miou).sum::<f64>() / n,
        pa: scores.iter().map(|s| s.pa).sum::<f64>() / n,
    };
    let var = |f: fn(&SegScores) -> f64, m: f64| -> f64 {
        if scores.len() < 2 {
            return 0.0;
        }
        scores.iter().map(|s| (f(s) - m).powi(2)).sum::<f64>() / (n - 1.0)
    };
    let std = SegScores {
        dice: var(|s| s.dice, mean.dice).sqrt(),
        miou: var(|s| s.miou, mean.miou).sqrt(),
        pa: var(|s| s.pa, mean.pa).sqrt(),
    };
    Ok(SegAggregate {
        mean,
        std,
        n: scores.len(),
    })
}

fn check_finite(values: &[f64]) -> Result<(), MetricsError> {
    if values.iter().any(|v| !v.is_finite()) {
        Err(MetricsError::NonFiniteScore)
    } else {
        Ok(())
    }
}

/// Area under the ROC curve for separating `abnormal` (positive) from
/// `normal` (negative) scores: the probability that a random abnormal score
/// exceeds a random normal one, ties counted half. Computed by the
/// rank-statistic formulation with tie-averaged ranks.
pub fn auroc(normal: &[f64], abnormal: &[f64]) -> Result<f64, MetricsError> {
    if normal.is_empty() {
        return Err(MetricsError::EmptyInput("no normal scores"));
    }
    if abnormal.is_empty() {
        return Err(MetricsError::EmptyInput("no abnormal scores"));
    }
    check_finite(normal)?;
    check_finite(abnormal)?;

    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&v| (v, false))
        .chain(abnormal.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; the tie group i..j shares the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos = abnormal.len() as f64;
    let n_neg = normal.len() as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// Rescales `values` to [0,1] in place by the family min/max; a constant
/// family maps to all 0.5. Returns the (min, max) that was used.
pub fn minmax_normalize(values: &mut [f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput("no scores to normalize"));
    }
    check_finite(values)?;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in values.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        for v in values.iter_mut() {
            *v = 0.5;
        }
    }
    Ok((lo, hi))
}

/// One histogram bin over normalized scores, with per-label raw counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub normal: usize,
    pub abnormal: usize,
}

/// Distribution report for one score family (e.g. the global inter score).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyReport {
    pub name: String,
    pub auroc: f64,
    /// Sum over bins of min(normal frequency, abnormal frequency) after
    /// per-family min-max normalization: 0 = fully separated, 1 = identical.
    pub overlap: f64,
    /// Normalization range applied before binning (min == max means the
    /// degenerate constant-family convention kicked in).
    pub score_min: f64,
    pub score_max: f64,
    pub bins: Vec<HistBin>,
}

fn bin_index(v: f64, bins: usize) -> usize {
    let idx = (v.clamp(0.0, 1.0) * bins as f64).floor() as usize;
    idx.min(bins - 1)
}

/// Histogram + overlap + AUROC for one family of scores.
pub fn family_report(
    name: &str,
    normal: &[f64],
    abnormal: &[f64],
    bins: usize,
) -> Result<FamilyReport, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::EmptyInput("bins must be positive"));
    }
    let auc = auroc(normal, abnormal)?;

    let mut pooled: Vec<f64> = normal.iter().chain(abnormal.iter()).cloned().collect();
    let (lo, hi) = minmax_normalize(&mut pooled)?;
    let (norm_n, norm_a) = pooled.split_at(normal.len());

    let mut hist = vec![(0usize, 0usize); bins];
    for &v in norm_n {
        hist[bin_index(v, bins)].0 += 1;
    }
    for &v in norm_a {
        hist[bin_index(v, bins)].1 += 1;
    }

    let (tot_n, tot_a) = (normal.len() as f64, abnormal.len() as f64);
    let overlap = hist
        .iter()
        .map(|&(n, a)| (n as f64 / tot_n).min(a as f64 / tot_a))
        .sum::<f64>();

    let width = 1.0 / bins as f64;
    let bins_out = hist
        .iter()
        .enumerate()
        .map(|(i, &(n, a))| HistBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            normal: n,
            abnormal: a,
        })
        .collect();

    Ok(FamilyReport {
        name: name.to_string(),
        auroc: auc,
        overlap,
        score_min: lo,
        score_max: hi,
        bins: bins_out,
    })
}

/// Full distribution report across every score family: the global inter and
/// intra scores plus each per-modality restriction. Labels are 0 (normal) or
/// 1 (abnormal).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramReport {
    pub families: Vec<FamilyReport>,
}

pub fn histogram_report(
    scores: &[DiscrepancyScores],
    labels: &[u8],
    bins: usize,
) -> Result<HistogramReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput("no scores"));
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricsError::NonBinaryInput(bad));
    }

    let split = |extract: &dyn Fn(&DiscrepancyScores) -> f64| -> (Vec<f64>, Vec<f64>) {
        let mut normal = Vec::new();
        let mut abnormal = Vec::new();
        for (s, &l) in scores.iter().zip(labels) {
            if l == 0 {
                normal.push(extract(s));
            } else {
                abnormal.push(extract(s));
            }
        }
        (normal, abnormal)
    };

    let n_modalities = scores[0].inter_per_modality.len();
    let mut families = Vec::with_capacity(2 + 2 * n_modalities);
    let (n, a) = split(&|s| s.inter_global);
    families.push(family_report("inter_global", &n, &a, bins)?);
    let (n, a) = split(&|s| s.intra_global);
    families.push(family_report("intra_global", &n, &a, bins)?);
    for c in 0..n_modalities {
        let (n, a) = split(&|s| s.inter_per_modality[c]);
        families.push(family_report(&format!("inter_modality_{c}"), &n, &a, bins)?);
        let (n, a) = split(&|s| s.intra_per_modality[c]);
        families.push(family_report(&format!("intra_modality_{c}"), &n, &a, bins)?);
    }
    Ok(HistogramReport { families })
}
