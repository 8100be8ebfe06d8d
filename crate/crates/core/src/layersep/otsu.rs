//! Otsu thresholding on 256 quantisation levels.
//!
//! Between-class variance is compared in exact integer arithmetic, so the
//! chosen level (lowest maximiser on ties) does not depend on summation
//! order.

use serde::{Deserialize, Serialize};

use crate::image::LabelGrid;
use crate::pgm::quantize;

use super::VesselnessMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtsuResult {
    pub labels: LabelGrid,
    /// Pixels with a level strictly above this are foreground.
    pub level: Option<u8>,
    /// True when no threshold separates two non-empty classes with positive
    /// between-class variance (e.g. a constant map).
    pub degenerate: bool,
}

pub fn quantize_levels(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| quantize(v)).collect()
}

/// Exact comparison key for the between-class variance at threshold `t`:
/// `σ_b² · N² = (N₁·S₀ − N₀·S₁)² / (N₀·N₁)`, kept as a fraction.
#[derive(Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn greater_than(self, other: Score) -> bool {
        self.num * other.den > other.num * self.den
    }
}

fn score(n0: u128, s0: u128, n1: u128, s1: u128) -> Option<Score> {
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let a = n1 * s0;
    let b = n0 * s1;
    let diff = a.abs_diff(b);
    Some(Score {
        num: diff * diff,
        den: n0 * n1,
    })
}

/// Returns the Otsu level for a histogram of 256 levels, or `None` when the
/// maximal between-class variance is zero.
pub fn otsu_level(hist: &[u64; 256]) -> Option<u8> {
    let total_n: u128 = hist.iter().map(|&c| c as u128).sum();
    let total_s: u128 = hist
        .iter()
        .enumerate()
        .map(|(l, &c)| l as u128 * c as u128)
        .sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(u8, Score)> = None;
    for t in 0..256usize {
        n0 += hist[t] as u128;
        s0 += t as u128 * hist[t] as u128;
        let Some(sc) = score(n0, s0, total_n - n0, total_s - s0) else {
            continue;
        };
        if sc.num == 0 {
            continue;
        }
        match best {
            Some((_, b)) if !sc.greater_than(b) => {}
            _ => best = Some((t as u8, sc)),
        }
    }
    best.map(|(t, _)| t)
}

pub fn otsu_threshold(map: &VesselnessMap) -> OtsuResult {
    let levels = quantize_levels(map.values());
    let mut hist = [0u64; 256];
    for &l in &levels {
        hist[l as usize] += 1;
    }
    let (w, h) = map.dims();
    match otsu_level(&hist) {
        Some(t) => OtsuResult {
            labels: LabelGrid::from_fn(w, h, |i| levels[i] > t),
            level: Some(t),
            degenerate: false,
        },
        None => OtsuResult {
            labels: LabelGrid::zeros(w, h),
            level: None,
            degenerate: true,
        },
    }
}
