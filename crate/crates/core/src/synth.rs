//! Deterministic synthetic angiogram sequences with known vessel masks.
//!
//! A frame is
//! `background + vignette + ribs − moving[t] − contrast[t] · vessels + noise`,
//! clamped to `[0, 1]`. The background is a sum of `background_rank`
//! separable smooth fields, identical in every frame. `moving[t]` holds
//! broad, soft-edged arcs that translate from frame to frame (breathing
//! motion); they are dark and curvilinear like vessels but not part of the
//! ground truth. The vessel tree is a set of randomly branching polylines
//! drawn as dark tubes whose width and opacity shrink with branching depth,
//! so terminal branches are thin and faint. The ground-truth mask is the
//! tube support at the key frame.
//!
//! All randomness comes from [`crate::rng::stream`] keyed by the config seed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, GraySequence, LabelGrid};
use crate::rng::{self, tag};
use rand::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    /// Number of primary trunks; each trunk branches recursively.
    pub vessel_branches: usize,
    /// Diameter of a trunk in pixels.
    pub max_vessel_width: f64,
    pub background_rank: usize,
    pub noise_sigma: f64,
    /// Per-frame vessel opacity; its (first) maximum marks the key frame.
    pub contrast_profile: Vec<f64>,
    /// Intensity drop at the centre of a fully opaque trunk.
    pub vessel_contrast: f64,
    /// Opacity multiplier applied per branching level.
    pub branch_fade: f64,
    /// Maximum branching depth below a trunk.
    pub max_depth: usize,
    /// Number of moving curvilinear distractors.
    pub moving_structures: usize,
    /// Peak displacement of the distractors in pixels.
    pub motion_amplitude: f64,
    /// Intensity drop at the centre of a distractor.
    pub moving_contrast: f64,
}

impl SynthConfig {
    /// 64x64, 20 frames, rank-2 background, 3 trunks.
    pub fn desk(seed: u64) -> Self {
        Self::with_size(seed, 64, 64)
    }

    pub fn with_size(seed: u64, width: usize, height: usize) -> Self {
        let n_frames = 20;
        Self {
            seed,
            width,
            height,
            n_frames,
            vessel_branches: 3,
            max_vessel_width: 3.0,
            background_rank: 2,
            noise_sigma: 0.02,
            contrast_profile: default_contrast_profile(n_frames),
            vessel_contrast: 0.3,
            branch_fade: 0.65,
            max_depth: 2,
            moving_structures: 3,
            motion_amplitude: 8.0,
            moving_contrast: 0.15,
        }
    }

    pub fn key_frame_index(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.contrast_profile.iter().enumerate() {
            if c > self.contrast_profile[best] {
                best = i;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.width < 4 || self.height < 4 {
            return bad("image must be at least 4x4");
        }
        if self.n_frames == 0 {
            return bad("n_frames must be >= 1");
        }
        if self.background_rank == 0 {
            return bad("background_rank must be >= 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.contrast_profile.len() != self.n_frames {
            return bad("contrast_profile length must equal n_frames");
        }
        if self
            .contrast_profile
            .iter()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return bad("contrast_profile values must lie in [0, 1]");
        }
        if !(self.max_vessel_width > 0.0) {
            return bad("max_vessel_width must be positive");
        }
        if !(0.0..=1.0).contains(&self.vessel_contrast) || !(0.0..=1.0).contains(&self.branch_fade) {
            return bad("vessel_contrast and branch_fade must lie in [0, 1]");
        }
        if !(self.motion_amplitude >= 0.0) || !(0.0..=1.0).contains(&self.moving_contrast) {
            return bad("motion_amplitude must be >= 0 and moving_contrast in [0, 1]");
        }
        Ok(())
    }
}

/// Triangular bolus: zero for the first and last quarter, peak 1 at the
/// middle frame.
pub fn default_contrast_profile(n_frames: usize) -> Vec<f64> {
    if n_frames == 1 {
        return vec![1.0];
    }
    let key = n_frames / 2;
    let half = (n_frames as f64 / 4.0).max(1.0);
    (0..n_frames)
        .map(|t| (1.0 - (t as f64 - key as f64).abs() / half).max(0.0))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    opacity: f64,
}

impl Segment {
    fn distance(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (qx, qy) = (self.a.0 + t * dx, self.a.1 + t * dy);
        ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
    }
}

/// Output of [`generate_layers`]: the individual layers before mixing.
#[derive(Debug, Clone)]
pub struct SynthLayers {
    /// Static background including vignette and ribs.
    pub background: Vec<f64>,
    /// Vessel absorption in `[0, 1]` (opacity x chord profile).
    pub absorption: Vec<f64>,
    /// Per-frame attenuation from the moving distractors.
    pub moving: Vec<Vec<f64>>,
    pub truth: LabelGrid,
}

pub fn generate_sequence(config: &SynthConfig) -> Result<(GraySequence, LabelGrid), SynthError> {
    let layers = generate_layers(config)?;
    let (w, h) = (config.width, config.height);
    let mut frames = Vec::with_capacity(config.n_frames);
    for (t, &c) in config.contrast_profile.iter().enumerate() {
        let mut noise = rng::stream(config.seed, &[tag::SYNTH, 100 + t as u64]);
        let data = layers
            .background
            .iter()
            .zip(&layers.absorption)
            .zip(&layers.moving[t])
            .map(|((&bg, &a), &m)| {
                let n = if config.noise_sigma > 0.0 {
                    config.noise_sigma * rng::normal(&mut noise)
                } else {
                    0.0
                };
                bg - m - config.vessel_contrast * c * a + n
            })
            .collect();
        frames.push(GrayImage::from_clamped(w, h, data).expect("dimensions are consistent"));
    }
    let seq = GraySequence::new(frames, config.key_frame_index()).expect("valid sequence");
    Ok((seq, layers.truth))
}

pub fn generate_layers(config: &SynthConfig) -> Result<SynthLayers, SynthError> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let background = background_field(config);
    let segments = vessel_tree(config);
    let mut absorption = vec![0.0; w * h];
    let mut truth = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64, y as f64);
            let i = y * w + x;
            for s in &segments {
                let d = s.distance(p);
                // Chord length through a cylinder, widened by half a pixel so
                // that every pixel of the support absorbs something.
                let r = s.radius + 0.5;
                if d < r {
                    let a = s.opacity * (1.0 - (d / r).powi(2)).sqrt();
                    absorption[i] = f64::max(absorption[i], a);
                }
                if d <= s.radius {
                    truth[i] = 1;
                }
            }
        }
    }
    Ok(SynthLayers {
        background,
        absorption,
        moving: moving_fields(config),
        truth: LabelGrid::new(w, h, truth).expect("dimensions are consistent"),
    })
}

fn background_field(config: &SynthConfig) -> Vec<f64> {
    let (w, h) = (config.width, config.height);
    let mut rng = rng::stream(config.seed, &[tag::SYNTH, 1]);
    let mut field = vec![0.62; w * h];
    // Separable smooth fields u_r(x) * v_r(y).
    for _ in 0..config.background_rank {
        let amp = rng.random_range(0.04..0.09);
        let u = smooth_profile(&mut rng, w);
        let v = smooth_profile(&mut rng, h);
        for y in 0..h {
            for x in 0..w {
                field[y * w + x] += amp * u[x] * v[y];
            }
        }
    }
    // Large-scale vignette.
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let rmax = (cx * cx + cy * cy).sqrt();
    for y in 0..h {
        for x in 0..w {
            let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / rmax;
            field[y * w + x] -= 0.1 * r * r;
        }
    }
    // Broad, soft rib arcs: circles centred far outside the frame.
    let n_ribs = 2;
    for _ in 0..n_ribs {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(1.2..1.8) * w.max(h) as f64;
        let (ox, oy) = (cx + dist * angle.cos(), cy + dist * angle.sin());
        let radius = dist + rng.random_range(-0.3..0.3) * w.min(h) as f64;
        let half_width = rng.random_range(4.0..6.0);
        let amp = rng.random_range(0.03..0.05);
        for y in 0..h {
            for x in 0..w {
                let d = (((x as f64 - ox).powi(2) + (y as f64 - oy).powi(2)).sqrt() - radius).abs();
                if d < half_width {
                    let s = 0.5 * (1.0 + (std::f64::consts::PI * d / half_width).cos());
                    field[y * w + x] -= amp * s;
                }
            }
        }
    }
    field
}

/// Soft dark arcs translated along a fixed direction by
/// `motion_amplitude · sin(phase + 2πt/n)` in frame `t`.
fn moving_fields(config: &SynthConfig) -> Vec<Vec<f64>> {
    let (w, h) = (config.width, config.height);
    let mut rng = rng::stream(config.seed, &[tag::SYNTH, 3]);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    struct Arc {
        origin: (f64, f64),
        radius: f64,
        half_width: f64,
        dir: (f64, f64),
        phase: f64,
    }
    let arcs: Vec<Arc> = (0..config.moving_structures)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(1.0..2.0) * w.max(h) as f64;
            let radius = dist + rng.random_range(-0.35..0.35) * w.min(h) as f64;
            let m = rng.random_range(0.0..std::f64::consts::TAU);
            Arc {
                origin: (cx + dist * angle.cos(), cy + dist * angle.sin()),
                radius,
                half_width: rng.random_range(2.5..4.0),
                dir: (m.cos(), m.sin()),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    (0..config.n_frames)
        .map(|t| {
            let mut field = vec![0.0; w * h];
            for a in &arcs {
                let shift = config.motion_amplitude
                    * (a.phase + std::f64::consts::TAU * t as f64 / config.n_frames as f64).sin();
                let (ox, oy) = (a.origin.0 + shift * a.dir.0, a.origin.1 + shift * a.dir.1);
                for y in 0..h {
                    for x in 0..w {
                        let d = (((x as f64 - ox).powi(2) + (y as f64 - oy).powi(2)).sqrt() - a.radius).abs();
                        if d < a.half_width {
                            let s = 0.5 * (1.0 + (std::f64::consts::PI * d / a.half_width).cos());
                            let v = &mut field[y * w + x];
                            *v = f64::max(*v, config.moving_contrast * s);
                        }
                    }
                }
            }
            field
        })
        .collect()
}

/// Low-frequency cosine series normalised to `[0, 1]`.
fn smooth_profile(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64)> = (1..=3)
        .map(|k| {
            (
                k as f64,
                rng.random_range(-1.0..1.0) / k as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            terms
                .iter()
                .map(|(k, a, ph)| a * (std::f64::consts::PI * k * t + ph).cos())
                .sum()
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.iter().map(|v| (v - lo) / span).collect()
}

fn vessel_tree(config: &SynthConfig) -> Vec<Segment> {
    let mut rng = rng::stream(config.seed, &[tag::SYNTH, 2]);
    let (w, h) = (config.width as f64, config.height as f64);
    let mut segments = Vec::new();
    for trunk in 0..config.vessel_branches {
        // Trunks enter from a random edge, aimed roughly at the centre.
        let edge = rng.random_range(0..4);
        let along = rng.random_range(0.15..0.85);
        let start = match edge {
            0 => (along * w, 0.0),
            1 => (w - 1.0, along * h),
            2 => (along * w, h - 1.0),
            _ => (0.0, along * h),
        };
        let target = (
            w / 2.0 + rng.random_range(-0.2..0.2) * w,
            h / 2.0 + rng.random_range(-0.2..0.2) * h,
        );
        let angle = (target.1 - start.1).atan2(target.0 - start.0) + rng.random_range(-0.3..0.3);
        let length = rng.random_range(0.45..0.65) * w.max(h);
        grow(
            &mut rng,
            config,
            Branch {
                start,
                angle,
                radius: config.max_vessel_width / 2.0,
                opacity: 1.0,
                length,
                depth: 0,
            },
            &mut segments,
        );
        let _ = trunk;
    }
    segments
}

struct Branch {
    start: (f64, f64),
    angle: f64,
    radius: f64,
    opacity: f64,
    length: f64,
    depth: usize,
}

fn grow(rng: &mut impl Rng, config: &SynthConfig, branch: Branch, out: &mut Vec<Segment>) {
    let (w, h) = (config.width as f64, config.height as f64);
    let step = 2.0;
    let n_steps = (branch.length / step).ceil() as usize;
    let mut pos = branch.start;
    let mut angle = branch.angle;
    let mut points = vec![pos];
    for _ in 0..n_steps {
        angle += 0.18 * rng::normal(rng);
        let next = (pos.0 + step * angle.cos(), pos.1 + step * angle.sin());
        if next.0 < -2.0 || next.1 < -2.0 || next.0 > w + 1.0 || next.1 > h + 1.0 {
            break;
        }
        out.push(Segment {
            a: pos,
            b: next,
            radius: branch.radius,
            opacity: branch.opacity,
        });
        pos = next;
        points.push(pos);
    }
    if branch.depth >= config.max_depth || points.len() < 4 {
        return;
    }
    let n_children = rng.random_range(1..=2);
    for _ in 0..n_children {
        let at = rng.random_range(points.len() / 5..points.len() * 4 / 5);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let child = Branch {
            start: points[at],
            angle: angle_at(&points, at) + side * rng.random_range(0.5..1.1),
            radius: (branch.radius * 0.6).max(0.6),
            opacity: branch.opacity * config.branch_fade,
            length: branch.length * rng.random_range(0.4..0.6),
            depth: branch.depth + 1,
        };
        grow(rng, config, child, out);
    }
}

fn angle_at(points: &[(f64, f64)], i: usize) -> f64 {
    let j = (i + 1).min(points.len() - 1);
    let i = j - 1;
    (points[j].1 - points[i].1).atan2(points[j].0 - points[i].0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_vessels_no_noise_gives_identical_frames() {
        let mut cfg = SynthConfig::desk(3);
        cfg.noise_sigma = 0.0;
        cfg.vessel_branches = 0;
        cfg.moving_structures = 0;
        let (seq, truth) = generate_sequence(&cfg).unwrap();
        assert_eq!(truth.foreground_count(), 0);
        for f in seq.frames() {
            assert_eq!(f, &seq.frames()[0]);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::desk(11);
        let a = generate_sequence(&cfg).unwrap();
        let b = generate_sequence(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = SynthConfig::desk(0);
        cfg.background_rank = 0;
        assert!(generate_sequence(&cfg).is_err());
        let mut cfg = SynthConfig::desk(0);
        cfg.contrast_profile.pop();
        assert!(generate_sequence(&cfg).is_err());
        let mut cfg = SynthConfig::desk(0);
        cfg.noise_sigma = -1.0;
        assert!(generate_sequence(&cfg).is_err());
    }

    #[test]
    fn key_frame_is_the_contrast_peak() {
        let cfg = SynthConfig::desk(0);
        assert_eq!(cfg.key_frame_index(), 10);
        assert_eq!(cfg.contrast_profile[10], 1.0);
    }
}
