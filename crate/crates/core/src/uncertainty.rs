//! Model uncertainty, vesselness uncertainty and their superpixel fusion.
//!
//! Both pixel maps are divided by their own maximum so each spans `[0, 1]`;
//! a map whose maximum is below `1e-12` is returned as all zeros.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::layersep::VesselnessMap;
use crate::segmodel::ExpectationMap;
use crate::superpixel::SuperpixelPartition;

const EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("map is {got:?}, expected {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("eta {0} outside [0, 1]")]
    InvalidEta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    Model,
    Vesselness,
    Fused,
}

/// Entropy used for model uncertainty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    /// `−E·log E`.
    #[default]
    Single,
    /// `−E·log E − (1−E)·log(1−E)`.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMap {
    width: usize,
    height: usize,
    kind: UncertaintyKind,
    values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn kind(&self) -> UncertaintyKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Heat image for display.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_clamped(self.width, self.height, self.values.clone()).expect("dimensions are consistent")
    }
}

/// `raw / max(raw)`, or zeros when the maximum is negligible.
fn normalise(raw: Vec<f64>) -> Vec<f64> {
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max < EPS {
        vec![0.0; raw.len()]
    } else {
        raw.into_iter().map(|v| (v / max).clamp(0.0, 1.0)).collect()
    }
}

/// `−p·log_b(p)` with `0·log 0 = 0`.
fn plogp(p: f64, ln_base: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.ln() / ln_base
    }
}

/// Model uncertainty from raw expectation values with an explicit log base.
pub fn model_uncertainty_values(
    width: usize,
    height: usize,
    expectation: &[f64],
    form: EntropyForm,
    log_base: f64,
) -> UncertaintyMap {
    assert_eq!(expectation.len(), width * height, "expectation buffer size");
    assert!(log_base > 0.0 && log_base != 1.0, "log base must be positive and not 1");
    let lb = log_base.ln();
    let raw = expectation
        .iter()
        .map(|&e| {
            let e = e.clamp(0.0, 1.0);
            match form {
                EntropyForm::Single => plogp(e, lb),
                EntropyForm::Full => plogp(e, lb) + plogp(1.0 - e, lb),
            }
        })
        .collect();
    UncertaintyMap {
        width,
        height,
        kind: UncertaintyKind::Model,
        values: normalise(raw),
    }
}

pub fn model_uncertainty(e: &ExpectationMap, form: EntropyForm) -> UncertaintyMap {
    let (w, h) = e.dims();
    model_uncertainty_values(w, h, &e.values(), form, std::f64::consts::E)
}

/// `s·(1−s)` normalised: peaks where the vesselness is most ambiguous.
pub fn vesselness_uncertainty(s: &VesselnessMap) -> UncertaintyMap {
    let (width, height) = s.dims();
    let raw = s.values().iter().map(|&v| v * (1.0 - v)).collect();
    UncertaintyMap {
        width,
        height,
        kind: UncertaintyKind::Vesselness,
        values: normalise(raw),
    }
}

/// Trade-off weight between vesselness and model uncertainty at iteration
/// `k` (1-based): `1 − θ(k−1)` while `k < 1 + 1/θ`, then 0.
///
/// The result is rounded to 12 decimals so decimal θ gives decimal η
/// (e.g. exactly 0.2 rather than 0.19999999999999996).
pub fn eta(k: u32, theta: f64) -> f64 {
    assert!(k >= 1, "iterations are 1-based");
    assert!(theta > 0.0 && theta <= 1.0, "theta must lie in (0, 1]");
    let km1 = f64::from(k - 1);
    if km1 < 1.0 / theta {
        let v = (1.0 - theta * km1).max(0.0);
        (v * 1e12).round() / 1e12
    } else {
        0.0
    }
}

/// Mean per-superpixel uncertainty, indexed by superpixel id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelUncertainty {
    pub values: Vec<f64>,
}

impl SuperpixelUncertainty {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per pixel `f = max(η·G, (1−η)·M)`, averaged over each superpixel.
pub fn fuse_mvu(
    model: &UncertaintyMap,
    vesselness: &UncertaintyMap,
    eta: f64,
    partition: &SuperpixelPartition,
) -> Result<SuperpixelUncertainty, UncertaintyError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(UncertaintyError::InvalidEta(eta));
    }
    let expected = partition.dims();
    for m in [model, vesselness] {
        if m.dims() != expected {
            return Err(UncertaintyError::DimensionMismatch {
                expected,
                got: m.dims(),
            });
        }
    }
    let values = (0..partition.n_superpixels())
        .map(|q| {
            let members = partition.members(q);
            let sum: f64 = members
                .iter()
                .map(|&j| {
                    let j = j as usize;
                    f64::max(eta * vesselness.values[j], (1.0 - eta) * model.values[j])
                })
                .sum();
            sum / members.len() as f64
        })
        .collect();
    Ok(SuperpixelUncertainty { values })
}
