//! Self-paced learning with sparse annotation refinement.
//!
//! Training alternates between fitting the model to weighted self-paced
//! labels, re-labelling from the model's own predictions, querying the
//! annotator for the most uncertain superpixels, and re-weighting pixels
//! with the diversity-regularised self-paced rule. Annotated pixels keep
//! their labels and a fixed weight `ω > 1` for the rest of the run.

mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, LabelGrid};
use crate::layersep::VesselnessMap;
use crate::segmodel::{predict_binary, ModelError, SegModel};
use crate::suggest::{merge_annotations, AnnotationSet, AnnotationStore, AnnotatorError, SuggestError};
use crate::superpixel::SuperpixelPartition;

pub use run::{arspl_run, Mode, RunReport, SplConfig, SplRun, StepOutcome, TestMetrics, TrainState};

#[derive(Debug, Error)]
pub enum SplError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Annotation(#[from] SuggestError),
    #[error("annotator: {0}")]
    Annotator(#[from] AnnotatorError),
    #[error("state: {0}")]
    State(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-pixel training weights; annotated pixels carry exactly `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentWeights {
    pub v: Vec<f64>,
    pub annotated: Vec<bool>,
}

impl LatentWeights {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn annotated_count(&self) -> usize {
        self.annotated.iter().filter(|&&a| a).count()
    }
}

/// Soft confidence weight `min(4·|s − 0.5|, 1)` from the vesselness map:
/// ambiguous pixels (s near 0.5) start with little weight.
pub fn init_latent_weights(map: &VesselnessMap) -> LatentWeights {
    LatentWeights {
        v: map.values().iter().map(|&s| latent_weight(s)).collect(),
        annotated: vec![false; map.len()],
    }
}

#[inline]
pub fn latent_weight(s: f64) -> f64 {
    (4.0 * (s - 0.5).abs()).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaceParams {
    pub tau: f64,
    pub gamma: f64,
}

/// Lower clamp on the schedule's log arguments.
pub const PACE_EPS: f64 = 1e-3;

/// `τ = −ln(τ₀ − μk)`, `γ = −ln(γ₀ − μk)`, arguments clamped at
/// [`PACE_EPS`].
pub fn pace_params(k: u32, tau0: f64, gamma0: f64, mu: f64) -> PaceParams {
    assert!(k >= 1, "iterations are 1-based");
    let f = |base: f64| -(base - mu * f64::from(k)).max(PACE_EPS).ln();
    PaceParams {
        tau: f(tau0),
        gamma: f(gamma0),
    }
}

/// Selection threshold for the pixel at 1-based loss rank `o`.
#[inline]
pub fn spld_threshold(o: usize, pace: PaceParams) -> f64 {
    let o = o as f64;
    pace.tau + pace.gamma / (o.sqrt() + (o - 1.0).sqrt())
}

/// Binary self-paced weights for one image: rank losses ascending (stable)
/// and keep rank `o` iff its loss is below [`spld_threshold`].
pub fn spld_assign(losses: &[f64], pace: PaceParams) -> Vec<u8> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    let mut v = vec![0u8; losses.len()];
    for (rank, &i) in order.iter().enumerate() {
        if losses[i] < spld_threshold(rank + 1, pace) {
            v[i] = 1;
        }
    }
    v
}

/// `Σ v·ℓ − τ·Σ v − γ·‖v‖₂` for one image.
pub fn spld_objective(losses: &[f64], v: &[u8], pace: PaceParams) -> f64 {
    let mut fit = 0.0;
    let mut count = 0.0;
    for (&l, &w) in losses.iter().zip(v) {
        if w != 0 {
            fit += l;
            count += 1.0;
        }
    }
    fit - pace.tau * count - pace.gamma * f64::sqrt(count)
}

/// Overwrites `labels` with the stored annotations.
pub fn override_with_annotations(labels: &mut LabelGrid, store: &AnnotationStore, partition: &SuperpixelPartition) {
    for (id, ann) in store.iter() {
        for (&p, &l) in partition.members(id as usize).iter().zip(ann) {
            labels.set(p as usize, l);
        }
    }
}

/// Model prediction with annotated pixels replaced by their annotations.
pub fn update_self_paced_labels(
    model: &SegModel,
    image: &GrayImage,
    store: &AnnotationStore,
    partition: &SuperpixelPartition,
) -> LabelGrid {
    let mut y = predict_binary(model, image);
    override_with_annotations(&mut y, store, partition);
    y
}

/// Self-paced labels, weights and annotations of one training image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageState {
    pub labels: LabelGrid,
    pub weights: LatentWeights,
    pub annotations: AnnotationStore,
}

impl ImageState {
    /// Validates `set` against the partition, merges it into the store and
    /// writes its labels and weight `omega` onto the covered pixels.
    pub fn apply_refinement(
        &mut self,
        set: &AnnotationSet,
        partition: &SuperpixelPartition,
        omega: f64,
    ) -> Result<(), SplError> {
        set.validate(partition)?;
        merge_annotations(&mut self.annotations, set)?;
        for sp in &set.superpixels {
            for (&p, &l) in partition.members(sp.id as usize).iter().zip(&sp.labels) {
                let p = p as usize;
                self.labels.set(p, l);
                self.weights.v[p] = omega;
                self.weights.annotated[p] = true;
            }
        }
        Ok(())
    }

    /// Re-applies `ω` on every annotated pixel.
    pub fn restore_annotated_weights(&mut self, omega: f64) {
        for (v, &a) in self.weights.v.iter_mut().zip(&self.weights.annotated) {
            if a {
                *v = omega;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_examples() {
        assert_eq!(latent_weight(0.5), 0.0);
        assert_eq!(latent_weight(1.0), 1.0);
        assert!((latent_weight(0.6) - 0.4).abs() < 1e-12);
        assert_eq!(latent_weight(0.0), 1.0);
    }

    #[test]
    fn pace_examples() {
        let p = pace_params(1, 0.75, 0.20, 0.01);
        assert!((p.tau - 0.3011).abs() < 1e-4 && (p.gamma - 1.6607).abs() < 1e-4);
        let p = pace_params(13, 0.75, 0.20, 0.01);
        assert!((p.tau - 0.4780).abs() < 1e-4 && (p.gamma - 2.6593).abs() < 1e-4);
        let late = pace_params(25, 0.75, 0.20, 0.01);
        assert_eq!(late.gamma, -PACE_EPS.ln());
        assert_eq!(pace_params(40, 0.75, 0.20, 0.01).gamma, late.gamma);
    }

    #[test]
    fn spld_example() {
        let pace = PaceParams {
            tau: 0.3011,
            gamma: 1.6607,
        };
        let th: Vec<f64> = (1..=3).map(|o| spld_threshold(o, pace)).collect();
        for (a, b) in th.iter().zip([1.9618, 0.9890, 0.8289]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert_eq!(spld_assign(&[0.1, 0.5, 2.0], pace), vec![1, 1, 0]);
        assert_eq!(spld_assign(&[0.0; 5], pace), vec![1; 5]);
        assert_eq!(spld_assign(&[5.0, 3.0], pace), vec![0, 0]);
    }
}
