//! Pixel-wise overlap metrics for binary masks.

use serde::{Deserialize, Serialize};

use crate::image::{ImageError, LabelGrid};

/// Confusion counts and the derived ratios. Every undefined `0/0` ratio is
/// reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
}

impl MetricReport {
    pub fn from_counts(tp: u64, fn_: u64, fp: u64) -> Self {
        Self {
            tp,
            fn_,
            fp,
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            dice: ratio(2 * tp, 2 * tp + fn_ + fp),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate_mask(pred: &LabelGrid, truth: &LabelGrid) -> Result<MetricReport, ImageError> {
    evaluate_where(pred, truth, |_| true)
}

/// Like [`evaluate_mask`] but only counting pixels where `include` holds.
pub fn evaluate_where(
    pred: &LabelGrid,
    truth: &LabelGrid,
    include: impl Fn(usize) -> bool,
) -> Result<MetricReport, ImageError> {
    if pred.dims() != truth.dims() {
        return Err(ImageError::DimensionMismatch {
            left: pred.dims(),
            right: truth.dims(),
        });
    }
    let (mut tp, mut fn_, mut fp) = (0u64, 0u64, 0u64);
    for (i, (&p, &t)) in pred.labels().iter().zip(truth.labels()).enumerate() {
        if !include(i) {
            continue;
        }
        match (p, t) {
            (1, 1) => tp += 1,
            (0, 1) => fn_ += 1,
            (1, 0) => fp += 1,
            _ => {}
        }
    }
    Ok(MetricReport::from_counts(tp, fn_, fp))
}

/// Mean of per-image recall, precision and dice plus pooled counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub images: usize,
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
    pub pooled_dice: f64,
}

impl MeanMetrics {
    pub fn from_reports(reports: &[MetricReport]) -> Self {
        let n = reports.len();
        if n == 0 {
            return Self {
                images: 0,
                recall: 0.0,
                precision: 0.0,
                dice: 0.0,
                pooled_dice: 0.0,
            };
        }
        let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        let (tp, fn_, fp) = reports
            .iter()
            .fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fn_, c + r.fp));
        Self {
            images: n,
            recall: mean(|r| r.recall),
            precision: mean(|r| r.precision),
            dice: mean(|r| r.dice),
            pooled_dice: MetricReport::from_counts(tp, fn_, fp).dice,
        }
    }
}
