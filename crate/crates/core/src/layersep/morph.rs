//! Grey-scale closing with a disk structuring element.

use crate::image::{GrayImage, GraySequence};

use super::LayerSepError;

/// Per-row half extents of a disk: for each `dy` in `-r..=r`, the largest
/// `dx` with `dx² + dy² <= (diameter / 2)²`.
#[derive(Debug, Clone)]
pub struct Disk {
    radius: isize,
    half_widths: Vec<isize>,
}

impl Disk {
    pub fn new(diameter: usize) -> Self {
        let r = diameter as f64 / 2.0;
        let radius = r.floor() as isize;
        let half_widths = (-radius..=radius)
            .map(|dy| {
                let rem = r * r - (dy * dy) as f64;
                rem.max(0.0).sqrt().floor() as isize
            })
            .collect();
        Self {
            radius,
            half_widths,
        }
    }

    pub fn offsets(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        (-self.radius..=self.radius)
            .zip(&self.half_widths)
            .flat_map(|(dy, &hw)| (-hw..=hw).map(move |dx| (dx, dy)))
    }
}

#[derive(Clone, Copy)]
enum Op {
    Dilate,
    Erode,
}

/// Out-of-image positions are ignored, which keeps `close(x) >= x`.
fn morph(data: &[f64], w: usize, h: usize, disk: &Disk, op: Op) -> Vec<f64> {
    let pick = match op {
        Op::Dilate => f64::max,
        Op::Erode => f64::min,
    };
    let init = match op {
        Op::Dilate => f64::NEG_INFINITY,
        Op::Erode => f64::INFINITY,
    };
    // 1D sliding extremum for each distinct half width, per row.
    let mut widths: Vec<isize> = disk.half_widths.clone();
    widths.sort_unstable();
    widths.dedup();
    let mut row_ext: Vec<Vec<f64>> = vec![vec![init; w * h]; widths.len()];
    for (wi, &hw) in widths.iter().enumerate() {
        for y in 0..h {
            let row = &data[y * w..(y + 1) * w];
            let out = &mut row_ext[wi][y * w..(y + 1) * w];
            for x in 0..w {
                let lo = (x as isize - hw).max(0) as usize;
                let hi = ((x as isize + hw) as usize).min(w - 1);
                out[x] = row[lo..=hi].iter().copied().fold(init, pick);
            }
        }
    }
    let mut out = vec![init; w * h];
    for (k, dy) in (-disk.radius..=disk.radius).enumerate() {
        let wi = widths.binary_search(&disk.half_widths[k]).unwrap();
        let src = &row_ext[wi];
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let sy = sy as usize;
            for x in 0..w {
                out[y * w + x] = pick(out[y * w + x], src[sy * w + x]);
            }
        }
    }
    out
}

pub fn close(image: &GrayImage, disk: &Disk) -> Vec<f64> {
    let (w, h) = image.dims();
    let dilated = morph(image.data(), w, h, disk, Op::Dilate);
    morph(&dilated, w, h, disk, Op::Erode)
}

/// Replaces every frame by `close(frame) − frame`. Dark structures narrower
/// than the disk become positive ridges; everything else goes to ~0.
pub fn difference_sequence(
    seq: &GraySequence,
    disk_diameter: usize,
) -> Result<GraySequence, LayerSepError> {
    let (w, h) = seq.dims();
    if disk_diameter == 0 {
        return Err(LayerSepError::InvalidDisk(disk_diameter));
    }
    if disk_diameter > w.min(h) {
        return Err(LayerSepError::DiskTooLarge {
            diameter: disk_diameter,
            width: w,
            height: h,
        });
    }
    let disk = Disk::new(disk_diameter);
    let frames = crate::par::map(seq.frames(), |f| {
        let closed = close(f, &disk);
        let diff = closed
            .iter()
            .zip(f.data())
            .map(|(c, x)| (c - x).max(0.0))
            .collect();
        GrayImage::from_clamped(w, h, diff).expect("dimensions are consistent")
    });
    Ok(GraySequence::new(frames, seq.key_frame_index()).expect("shape preserved"))
}
