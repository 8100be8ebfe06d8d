//! Raster types shared by every stage of the pipeline.
//!
//! Intensities are unit-range `f64` values stored row-major. Binary masks
//! use `u8` with `0` for background and `1` for vessel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("buffer holds {got} values but {width}x{height} needs {expected}")]
    LengthMismatch {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("label {value} at index {index} is not binary")]
    NonBinaryLabel { index: usize, value: u8 },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("sequence must hold at least one frame")]
    EmptySequence,
    #[error("key frame {key} out of range for {frames} frames")]
    KeyFrameOutOfRange { key: usize, frames: usize },
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_len(width, height, data.len())?;
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self, ImageError> {
        check_len(width, height, data.len())?;
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Ordered stack of equally sized frames with a designated key frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GraySequence {
    frames: Vec<GrayImage>,
    key_frame_index: usize,
}

impl GraySequence {
    pub fn new(frames: Vec<GrayImage>, key_frame_index: usize) -> Result<Self, ImageError> {
        let first = frames.first().ok_or(ImageError::EmptySequence)?;
        if key_frame_index >= frames.len() {
            return Err(ImageError::KeyFrameOutOfRange {
                key: key_frame_index,
                frames: frames.len(),
            });
        }
        let dims = first.dims();
        if let Some(bad) = frames.iter().find(|f| f.dims() != dims) {
            return Err(ImageError::DimensionMismatch {
                left: dims,
                right: bad.dims(),
            });
        }
        Ok(Self {
            frames,
            key_frame_index,
        })
    }

    pub fn frames(&self) -> &[GrayImage] {
        &self.frames
    }

    pub fn key_frame_index(&self) -> usize {
        self.key_frame_index
    }

    pub fn key_frame(&self) -> &GrayImage {
        &self.frames[self.key_frame_index]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Pixel-major matrix (`pixels x frames`) in column-major storage, the
    /// layout the low-rank solver consumes.
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        let (w, h) = self.dims();
        let n = w * h;
        let mut data = Vec::with_capacity(n * self.frames.len());
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        nalgebra::DMatrix::from_vec(n, self.frames.len(), data)
    }
}

/// Per-pixel binary labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self, ImageError> {
        check_len(width, height, labels.len())?;
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, v)| **v > 1) {
            return Err(ImageError::NonBinaryLabel { index, value });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        Self {
            width,
            height,
            labels: (0..width * height).map(|i| u8::from(f(i))).collect(),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, index: usize) -> u8 {
        self.labels[index]
    }

    /// Panics if `value > 1`.
    #[inline]
    pub fn set(&mut self, index: usize, value: u8) {
        assert!(value <= 1, "label must be binary");
        self.labels[index] = value;
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.foreground_count() as f64 / self.labels.len() as f64
        }
    }

    /// Renders the mask as an image with vessel = 1.0.
    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| f64::from(l)).collect(),
        }
    }

    /// Thresholds an image at 0.5 (inclusive).
    pub fn from_image(image: &GrayImage) -> Self {
        Self::from_fn(image.width(), image.height(), |i| image.data()[i] >= 0.5)
    }
}

fn check_len(width: usize, height: usize, got: usize) -> Result<(), ImageError> {
    let expected = width * height;
    if expected != got {
        return Err(ImageError::LengthMismatch {
            width,
            height,
            expected,
            got,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert_eq!(
            GrayImage::new(2, 1, vec![0.0, 1.5]),
            Err(ImageError::OutOfRange {
                index: 1,
                value: 1.5
            })
        );
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn sequence_invariants() {
        let a = GrayImage::filled(2, 2, 0.1);
        let b = GrayImage::filled(3, 2, 0.1);
        assert_eq!(GraySequence::new(vec![], 0), Err(ImageError::EmptySequence));
        assert!(matches!(
            GraySequence::new(vec![a.clone()], 1),
            Err(ImageError::KeyFrameOutOfRange { .. })
        ));
        assert!(matches!(
            GraySequence::new(vec![a.clone(), b], 0),
            Err(ImageError::DimensionMismatch { .. })
        ));
        let s = GraySequence::new(vec![a.clone(), a], 1).unwrap();
        let m = s.to_matrix();
        assert_eq!(m.shape(), (4, 2));
    }

    #[test]
    fn labels_must_be_binary() {
        assert!(LabelGrid::new(2, 1, vec![0, 2]).is_err());
        let g = LabelGrid::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(g.foreground_count(), 2);
        assert_eq!(LabelGrid::from_image(&g.to_image()), g);
    }
}
