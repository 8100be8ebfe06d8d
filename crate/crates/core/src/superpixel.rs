//! SLIC superpixels on single-channel images.
//!
//! Features are `(intensity, x, y)`; the distance between a pixel and a
//! cluster centre is `sqrt(d_I² + (m / S)² · d_xy²)` with `S` the seed grid
//! interval and `m` the compactness. After the k-means sweeps every label
//! keeps its largest 4-connected component and the remaining fragments are
//! merged into an adjacent superpixel, so each output superpixel is
//! 4-connected. Ids are dense and numbered in raster order of first
//! appearance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;

#[derive(Debug, Error)]
pub enum SuperpixelError {
    #[error("target count {target} must lie in [1, {pixels}]")]
    InvalidTarget { target: usize, pixels: usize },
    #[error("partition has {0} superpixels, more than a 16-bit grid can hold")]
    TooManySuperpixels(usize),
    #[error("corrupt partition file: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub target_count: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl SlicParams {
    /// Superpixel density of 3000 per 512x512 image, scaled to `area`.
    pub fn for_area(area: usize) -> Self {
        Self {
            target_count: ((3000.0 * area as f64 / (512.0 * 512.0)).round() as usize).max(1),
            compactness: 0.1,
            iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperpixelPartition {
    width: usize,
    height: usize,
    assignment: Vec<u32>,
    members: Vec<Vec<u32>>,
}

impl SuperpixelPartition {
    /// Builds a partition from a dense assignment. Panics if ids are not
    /// dense in `[0, n)`.
    pub fn from_assignment(width: usize, height: usize, assignment: Vec<u32>) -> Self {
        assert_eq!(assignment.len(), width * height);
        let n = assignment.iter().map(|&a| a as usize + 1).max().unwrap_or(0);
        let mut members = vec![Vec::new(); n];
        for (i, &a) in assignment.iter().enumerate() {
            members[a as usize].push(i as u32);
        }
        assert!(members.iter().all(|m| !m.is_empty()), "superpixel ids must be dense");
        Self {
            width,
            height,
            assignment,
            members,
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

    pub fn n_superpixels(&self) -> usize {
        self.members.len()
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Pixel indices of superpixel `id`, ascending.
    pub fn members(&self, id: usize) -> &[u32] {
        &self.members[id]
    }

    pub fn size(&self, id: usize) -> usize {
        self.members[id].len()
    }

    /// True when every superpixel is 4-connected.
    pub fn is_connected(&self) -> bool {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut stack = Vec::new();
        for (id, m) in self.members.iter().enumerate() {
            let start = m[0] as usize;
            let mut reached = 0;
            stack.push(start);
            seen[start] = true;
            while let Some(p) = stack.pop() {
                reached += 1;
                for q in neighbours4(p, w, h) {
                    if !seen[q] && self.assignment[q] as usize == id {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            if reached != m.len() {
                return false;
            }
        }
        true
    }

    /// Raw little-endian u16 grid plus a JSON sidecar at `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SuperpixelError> {
        let path = path.as_ref();
        if self.n_superpixels() > u16::MAX as usize + 1 {
            return Err(SuperpixelError::TooManySuperpixels(self.n_superpixels()));
        }
        let bytes: Vec<u8> = self
            .assignment
            .iter()
            .flat_map(|&a| (a as u16).to_le_bytes())
            .collect();
        let sidecar = PartitionSidecar {
            n_superpixels: self.n_superpixels(),
            width: self.width,
            height: self.height,
        };
        write(path, &bytes)?;
        write(
            &sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)
                .expect("sidecar serialises")
                .as_bytes(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SuperpixelError> {
        let path = path.as_ref();
        let side = read(&sidecar_path(path))?;
        let sidecar: PartitionSidecar =
            serde_json::from_slice(&side).map_err(|e| SuperpixelError::Corrupt(e.to_string()))?;
        let bytes = read(path)?;
        let n = sidecar.width * sidecar.height;
        if bytes.len() != 2 * n {
            return Err(SuperpixelError::Corrupt(format!(
                "expected {} bytes, found {}",
                2 * n,
                bytes.len()
            )));
        }
        let assignment: Vec<u32> = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect();
        if assignment.iter().any(|&a| a as usize >= sidecar.n_superpixels) {
            return Err(SuperpixelError::Corrupt("id exceeds n_superpixels".into()));
        }
        let mut present = vec![false; sidecar.n_superpixels];
        assignment.iter().for_each(|&a| present[a as usize] = true);
        if present.iter().any(|p| !p) {
            return Err(SuperpixelError::Corrupt("ids are not dense".into()));
        }
        Ok(Self::from_assignment(sidecar.width, sidecar.height, assignment))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionSidecar {
    n_superpixels: usize,
    width: usize,
    height: usize,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), SuperpixelError> {
    fs::write(path, bytes).map_err(|source| SuperpixelError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, SuperpixelError> {
    fs::read(path).map_err(|source| SuperpixelError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[inline]
fn neighbours4(p: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % w, p / w);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

#[derive(Clone, Copy)]
struct Centre {
    i: f64,
    x: f64,
    y: f64,
}

pub fn slic(image: &GrayImage, params: &SlicParams) -> Result<SuperpixelPartition, SuperpixelError> {
    let (w, h) = image.dims();
    let n = w * h;
    if params.target_count == 0 || params.target_count > n {
        return Err(SuperpixelError::InvalidTarget {
            target: params.target_count,
            pixels: n,
        });
    }
    let data = image.data();
    let s = (n as f64 / params.target_count as f64).sqrt();
    let nx = ((w as f64 / s).round() as usize).clamp(1, w);
    let ny = ((h as f64 / s).round() as usize).clamp(1, h);
    let (step_x, step_y) = (w as f64 / nx as f64, h as f64 / ny as f64);

    let mut centres: Vec<Centre> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * step_x - 0.5;
            let y = (j as f64 + 0.5) * step_y - 0.5;
            let (x, y) = lowest_gradient_seed(data, w, h, x.round() as usize, y.round() as usize, (x, y));
            let p = (y.round() as usize).min(h - 1) * w + (x.round() as usize).min(w - 1);
            centres.push(Centre { i: data[p], x, y });
        }
    }

    let spatial = (params.compactness / s).powi(2);
    let radius = s.ceil() as isize;
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.iters.max(1) {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (k, c) in centres.iter().enumerate() {
            let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
            if cy + radius < 0 || cx + radius < 0 {
                continue;
            }
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let di = data[p] - c.i;
                    let dx = x as f64 - c.x;
                    let dy = y as f64 - c.y;
                    let d = di * di + spatial * (dx * dx + dy * dy);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        // Pixels outside every search window go to the spatially nearest centre.
        for p in 0..n {
            if labels[p] == u32::MAX {
                let (x, y) = ((p % w) as f64, (p / w) as f64);
                let k = centres
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da = (a.1.x - x).powi(2) + (a.1.y - y).powi(2);
                        let db = (b.1.x - x).powi(2) + (b.1.y - y).powi(2);
                        da.total_cmp(&db)
                    })
                    .map(|(k, _)| k)
                    .unwrap();
                labels[p] = k as u32;
            }
        }
        let mut acc = vec![(0.0, 0.0, 0.0, 0usize); centres.len()];
        for p in 0..n {
            let a = &mut acc[labels[p] as usize];
            a.0 += data[p];
            a.1 += (p % w) as f64;
            a.2 += (p / w) as f64;
            a.3 += 1;
        }
        for (c, a) in centres.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let m = a.3 as f64;
                *c = Centre {
                    i: a.0 / m,
                    x: a.1 / m,
                    y: a.2 / m,
                };
            }
        }
    }

    Ok(SuperpixelPartition::from_assignment(
        w,
        h,
        enforce_connectivity(&labels, w, h),
    ))
}

/// Moves a seed to the lowest-gradient pixel of its 3x3 neighbourhood,
/// keeping the grid position on ties.
fn lowest_gradient_seed(
    data: &[f64],
    w: usize,
    h: usize,
    x: usize,
    y: usize,
    grid: (f64, f64),
) -> (f64, f64) {
    let (x, y) = (x.min(w - 1), y.min(h - 1));
    let grad = |x: usize, y: usize| -> f64 {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return f64::INFINITY;
        }
        let gx = data[y * w + x + 1] - data[y * w + x - 1];
        let gy = data[(y + 1) * w + x] - data[(y - 1) * w + x];
        gx * gx + gy * gy
    };
    let mut best = grad(x, y);
    let mut pos = grid;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let (qx, qy) = (x as isize + dx, y as isize + dy);
            if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                continue;
            }
            let g = grad(qx as usize, qy as usize);
            if g < best {
                best = g;
                pos = (qx as f64, qy as f64);
            }
        }
    }
    pos
}

/// Keeps the largest 4-connected component of every label and merges the
/// other fragments into the adjacent superpixel with the most pixels (lowest
/// id on ties). Returns dense ids in raster order of first appearance.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize) -> Vec<u32> {
    let n = labels.len();
    // Connected components of the raw label map.
    let mut comp = vec![usize::MAX; n];
    let mut comp_label = Vec::new();
    let mut comp_pixels: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_pixels.len();
        let mut pixels = Vec::new();
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            pixels.push(p);
            for q in neighbours4(p, w, h) {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        comp_label.push(labels[start]);
        comp_pixels.push(pixels);
    }

    // Anchor = largest component of each label (first in raster order on ties).
    let n_comp = comp_pixels.len();
    let max_label = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut anchor: Vec<Option<usize>> = vec![None; max_label + 1];
    for c in 0..n_comp {
        let l = comp_label[c] as usize;
        match anchor[l] {
            Some(a) if comp_pixels[a].len() >= comp_pixels[c].len() => {}
            _ => anchor[l] = Some(c),
        }
    }
    // owner[c] = anchor component that c belongs to after merging.
    let mut owner: Vec<Option<usize>> = (0..n_comp)
        .map(|c| (anchor[comp_label[c] as usize] == Some(c)).then_some(c))
        .collect();
    let mut size: Vec<usize> = (0..n_comp)
        .map(|c| if owner[c].is_some() { comp_pixels[c].len() } else { 0 })
        .collect();

    loop {
        let mut changed = false;
        let mut pending = false;
        for c in 0..n_comp {
            if owner[c].is_some() {
                continue;
            }
            let mut best: Option<usize> = None;
            for &p in &comp_pixels[c] {
                for q in neighbours4(p, w, h) {
                    if let Some(o) = owner[comp[q]] {
                        best = match best {
                            Some(b) if size[b] > size[o] || (size[b] == size[o] && b <= o) => Some(b),
                            _ => Some(o),
                        };
                    }
                }
            }
            match best {
                Some(o) => {
                    owner[c] = Some(o);
                    size[o] += comp_pixels[c].len();
                    changed = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        assert!(changed, "fragment merge made no progress");
    }

    let mut dense = vec![u32::MAX; n_comp];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for p in 0..n {
        let o = owner[comp[p]].expect("every fragment has an owner");
        if dense[o] == u32::MAX {
            dense[o] = next;
            next += 1;
        }
        out[p] = dense[o];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(target: usize) -> SlicParams {
        SlicParams {
            target_count: target,
            compactness: 0.1,
            iters: 10,
        }
    }

    #[test]
    fn single_superpixel() {
        let img = GrayImage::filled(9, 7, 0.3);
        let p = slic(&img, &params(1)).unwrap();
        assert_eq!(p.n_superpixels(), 1);
        assert_eq!(p.size(0), 63);
    }

    #[test]
    fn constant_image_gives_square_tiles() {
        let img = GrayImage::filled(64, 64, 0.5);
        let p = slic(&img, &params(16)).unwrap();
        assert_eq!(p.n_superpixels(), 16);
        for id in 0..16 {
            let m = p.members(id);
            assert_eq!(m.len(), 256);
            let xs: Vec<usize> = m.iter().map(|&i| i as usize % 64).collect();
            let ys: Vec<usize> = m.iter().map(|&i| i as usize / 64).collect();
            let bw = xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1;
            let bh = ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1;
            assert_eq!((bw, bh), (16, 16));
        }
    }

    #[test]
    fn invalid_target() {
        let img = GrayImage::filled(4, 4, 0.5);
        assert!(slic(&img, &params(0)).is_err());
        assert!(slic(&img, &params(17)).is_err());
    }

    #[test]
    fn fragments_are_merged() {
        // Label 0 split in two by label 1; the smaller piece must be absorbed.
        let labels = vec![0, 1, 0, 0, 1, 0, 0, 1, 0];
        let out = enforce_connectivity(&labels, 3, 3);
        let part = SuperpixelPartition::from_assignment(3, 3, out);
        assert!(part.is_connected());
        assert_eq!(part.n_superpixels(), 2);
    }

    #[test]
    fn raw_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.sp");
        let img = GrayImage::new(8, 8, (0..64).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let p = slic(&img, &params(4)).unwrap();
        p.save(&path).unwrap();
        assert_eq!(SuperpixelPartition::load(&path).unwrap(), p);
        let side: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("p.sp.json")).unwrap()).unwrap();
        assert_eq!(side["n_superpixels"], p.n_superpixels());
    }
}
