//! Pseudo-label generation by layer separation.
//!
//! The pipeline removes large-scale structure with a morphological closing,
//! splits the difference sequence into a low-rank background layer and a
//! sparse vessel layer with robust PCA, reads the key frame of the sparse
//! layer as a vesselness map and binarises it with Otsu's threshold.

mod morph;
mod otsu;
mod rpca;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, GraySequence, LabelGrid};

pub use morph::{close, difference_sequence, Disk};
pub use otsu::{otsu_level, otsu_threshold, quantize_levels, OtsuResult};
pub use rpca::{
    rpca_ialm, singular_value_threshold, singular_values, soft_threshold, spectral_norm,
    LayerPair, RpcaConfig,
};

#[derive(Debug, Error, PartialEq)]
pub enum LayerSepError {
    #[error("disk diameter {0} is invalid")]
    InvalidDisk(usize),
    #[error("disk diameter {diameter} exceeds the {width}x{height} image")]
    DiskTooLarge {
        diameter: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid RPCA config: {0}")]
    InvalidRpcaConfig(String),
    #[error("input matrix contains non-finite values")]
    NonFinite,
    #[error("singular value decomposition failed")]
    SvdFailed,
    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
}

/// Per-pixel vessel likelihood in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselnessMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl VesselnessMap {
    /// Values are clamped into `[0, 1]`; non-finite values become 0.
    pub fn new(width: usize, height: usize, mut values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "vesselness buffer size");
        for v in &mut values {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(self.width, self.height, self.values.clone()).expect("values in range")
    }

    pub fn from_image(image: &GrayImage) -> Self {
        Self::new(image.width(), image.height(), image.data().to_vec())
    }
}

/// Takes the key-frame column of the sparse layer, drops negative values
/// (brighter-than-background artefacts) and scales the maximum to 1.
pub fn vesselness_from_layer(
    pair: &LayerPair,
    key_frame: usize,
    width: usize,
    height: usize,
) -> Result<VesselnessMap, LayerSepError> {
    let frames = pair.sparse.ncols();
    if key_frame >= frames {
        return Err(LayerSepError::FrameOutOfRange {
            index: key_frame,
            frames,
        });
    }
    let column: Vec<f64> = pair.sparse.column(key_frame).iter().copied().collect();
    Ok(vesselness_from_column(&column, width, height))
}

pub fn vesselness_from_column(column: &[f64], width: usize, height: usize) -> VesselnessMap {
    const EPS: f64 = 1e-12;
    let max = column.iter().copied().fold(0.0, f64::max);
    let values = if max < EPS {
        vec![0.0; column.len()]
    } else {
        column.iter().map(|&v| v.max(0.0) / max).collect()
    };
    VesselnessMap::new(width, height, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub disk_diameter: usize,
    /// ξ = `xi_scale / √n` with `n` the pixel count of one frame.
    pub xi_scale: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            disk_diameter: 20,
            xi_scale: 0.8,
            tol: 1e-6,
            max_iter: 500,
            rho: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub vesselness: VesselnessMap,
    pub labels: LabelGrid,
    pub otsu: OtsuResult,
    pub rpca_iterations: usize,
    pub rpca_residual: f64,
    pub rpca_converged: bool,
}

/// Full pseudo-label pipeline for one sequence.
pub fn pseudo_label(seq: &GraySequence, config: &PseudoLabelConfig) -> Result<PseudoLabel, LayerSepError> {
    let (w, h) = seq.dims();
    let diff = difference_sequence(seq, config.disk_diameter)?;
    let matrix = diff.to_matrix();
    let rpca_cfg = RpcaConfig {
        tol: config.tol,
        max_iter: config.max_iter,
        rho: config.rho,
        ..RpcaConfig::for_rows(w * h, config.xi_scale)
    };
    let pair = rpca_ialm(&matrix, &rpca_cfg)?;
    let vesselness = vesselness_from_layer(&pair, seq.key_frame_index(), w, h)?;
    let otsu = otsu_threshold(&vesselness);
    Ok(PseudoLabel {
        labels: otsu.labels.clone(),
        vesselness,
        otsu,
        rpca_iterations: pair.iterations,
        rpca_residual: pair.residual,
        rpca_converged: pair.converged,
    })
}
