//! Weakly supervised vessel segmentation workbench.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod image;
pub mod layersep;
pub mod metrics;
pub mod par;
pub mod pgm;
pub mod rng;
pub mod segmodel;
pub mod spl;
pub mod suggest;
pub mod superpixel;
pub mod synth;
pub mod uncertainty;
