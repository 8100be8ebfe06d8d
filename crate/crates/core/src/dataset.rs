//! Manifests, on-disk sequences and prepared training data.
//!
//! A manifest is JSON `{"train": [...], "val": [...], "test": [...]}` whose
//! entries are `{sequence_dir, key_frame_index, ground_truth_path?}`.
//! Relative paths resolve against the manifest's directory. A sequence
//! directory holds its frames as `*.pgm`, ordered by file name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, GraySequence, ImageError, LabelGrid};
use crate::layersep::{pseudo_label, LayerSepError, PseudoLabelConfig, VesselnessMap};
use crate::par;
use crate::pgm::{self, PgmError};
use crate::rng::{self, tag};
use crate::superpixel::{slic, SlicParams, SuperpixelError, SuperpixelPartition};
use crate::synth::{self, SynthConfig, SynthError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Pgm {
        path: PathBuf,
        #[source]
        source: PgmError,
    },
    #[error("{name}: {source}")]
    Image {
        name: String,
        #[source]
        source: ImageError,
    },
    #[error("{name}: {source}")]
    LayerSep {
        name: String,
        #[source]
        source: LayerSepError,
    },
    #[error("{name}: {source}")]
    Superpixel {
        name: String,
        #[source]
        source: SuperpixelError,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sequence_dir: PathBuf,
    pub key_frame_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<ManifestEntry>,
    #[serde(default)]
    pub val: Vec<ManifestEntry>,
    #[serde(default)]
    pub test: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.train.is_empty() {
            return Err(DatasetError::Manifest {
                path: path.to_path_buf(),
                message: "train split is empty".into(),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, json).map_err(io_err(path))
    }
}

/// A sequence with optional ground truth, before any processing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub name: String,
    pub sequence: GraySequence,
    pub truth: Option<LabelGrid>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawDataset {
    pub train: Vec<RawSample>,
    pub val: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

impl RawDataset {
    pub fn splits(&self) -> [&[RawSample]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Loads the `*.pgm` frames of `dir` in file-name order.
pub fn load_sequence(dir: &Path, key_frame_index: usize) -> Result<GraySequence, DatasetError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    let frames = files
        .iter()
        .map(|p| {
            pgm::load_pgm(p).map_err(|source| DatasetError::Pgm {
                path: p.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    GraySequence::new(frames, key_frame_index).map_err(|source| DatasetError::Image {
        name: dir.display().to_string(),
        source,
    })
}

fn load_entry(base: &Path, entry: &ManifestEntry) -> Result<RawSample, DatasetError> {
    let dir = base.join(&entry.sequence_dir);
    let sequence = load_sequence(&dir, entry.key_frame_index)?;
    let truth = match &entry.ground_truth_path {
        Some(p) => {
            let path = base.join(p);
            let t = pgm::load_label_pgm(&path).map_err(|source| DatasetError::Pgm {
                path: path.clone(),
                source,
            })?;
            if t.dims() != sequence.dims() {
                return Err(DatasetError::Image {
                    name: path.display().to_string(),
                    source: ImageError::DimensionMismatch {
                        left: sequence.dims(),
                        right: t.dims(),
                    },
                });
            }
            Some(t)
        }
        None => None,
    };
    let name = entry
        .sequence_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.sequence_dir.display().to_string());
    Ok(RawSample { name, sequence, truth })
}

/// Reads every sequence listed in the manifest at `path`.
pub fn load_manifest_dataset(path: &Path) -> Result<RawDataset, DatasetError> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load = |entries: &[ManifestEntry]| par::try_map(entries, |e| load_entry(base, e));
    Ok(RawDataset {
        train: load(&manifest.train)?,
        val: load(&manifest.val)?,
        test: load(&manifest.test)?,
    })
}

/// Writes `raw` as `NAME/frame_XXX.pgm`, `truth/NAME.pgm` and
/// `manifest.json` under `out`; returns the manifest path.
pub fn write_dataset(raw: &RawDataset, out: &Path) -> Result<PathBuf, DatasetError> {
    std::fs::create_dir_all(out.join("truth")).map_err(io_err(out))?;
    let write = |samples: &[RawSample]| -> Result<Vec<ManifestEntry>, DatasetError> {
        samples
            .iter()
            .map(|s| {
                let dir = out.join(&s.name);
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                for (t, f) in s.sequence.frames().iter().enumerate() {
                    let p = dir.join(format!("frame_{t:03}.pgm"));
                    pgm::save_pgm(f, &p).map_err(|source| DatasetError::Pgm { path: p, source })?;
                }
                let ground_truth_path = match &s.truth {
                    Some(t) => {
                        let rel = PathBuf::from("truth").join(format!("{}.pgm", s.name));
                        let p = out.join(&rel);
                        pgm::save_label_pgm(t, &p).map_err(|source| DatasetError::Pgm { path: p, source })?;
                        Some(rel)
                    }
                    None => None,
                };
                Ok(ManifestEntry {
                    sequence_dir: PathBuf::from(&s.name),
                    key_frame_index: s.sequence.key_frame_index(),
                    ground_truth_path,
                })
            })
            .collect()
    };
    let manifest = Manifest {
        train: write(&raw.train)?,
        val: write(&raw.val)?,
        test: write(&raw.test)?,
    };
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Synthetic dataset with `split = [train, val, test]` sequences. Sequence
/// `i` (counted across splits) uses the synth seed derived from
/// `(seed, i)` and is named `seq_{i:04}`.
pub fn synthetic_dataset(
    seed: u64,
    split: [usize; 3],
    width: usize,
    height: usize,
) -> Result<RawDataset, DatasetError> {
    synthetic_dataset_with(seed, split, |s| SynthConfig::with_size(s, width, height))
}

/// As [`synthetic_dataset`] with a caller-supplied config per derived seed.
pub fn synthetic_dataset_with(
    seed: u64,
    split: [usize; 3],
    config: impl Fn(u64) -> SynthConfig + Sync + Send,
) -> Result<RawDataset, DatasetError> {
    let total: usize = split.iter().sum();
    let samples = par::map_range(total, |i| {
        let cfg = config(rng::derive_key(seed, &[tag::SYNTH, i as u64]));
        synth::generate_sequence(&cfg).map(|(sequence, truth)| RawSample {
            name: format!("seq_{i:04}"),
            sequence,
            truth: Some(truth),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut it = samples.into_iter();
    Ok(RawDataset {
        train: it.by_ref().take(split[0]).collect(),
        val: it.by_ref().take(split[1]).collect(),
        test: it.take(split[2]).collect(),
    })
}

/// Default split of `count` sequences in proportion 4 : 1 : 2.
pub fn default_split(count: usize) -> [usize; 3] {
    let val = count / 7;
    let test = 2 * count / 7;
    [count - val - test, val, test]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub pseudo: PseudoLabelConfig,
    /// `None` picks [`SlicParams::for_area`] per image.
    pub slic: Option<SlicParams>,
}

impl PrepareConfig {
    /// About 384 superpixels per image (roughly 10 pixels each at 64×64).
    pub fn desk() -> Self {
        Self {
            pseudo: PseudoLabelConfig::default(),
            slic: Some(SlicParams {
                target_count: 384,
                ..SlicParams::for_area(1)
            }),
        }
    }
}

/// Key frame with everything the training loop needs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: GrayImage,
    pub truth: Option<LabelGrid>,
    pub vesselness: VesselnessMap,
    pub pseudo: LabelGrid,
    pub partition: SuperpixelPartition,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn prepare_sample(raw: &RawSample, cfg: &PrepareConfig) -> Result<Sample, DatasetError> {
    let pl = pseudo_label(&raw.sequence, &cfg.pseudo).map_err(|source| DatasetError::LayerSep {
        name: raw.name.clone(),
        source,
    })?;
    if !pl.rpca_converged {
        log::warn!("{}: RPCA stopped after {} iterations", raw.name, pl.rpca_iterations);
    }
    let image = raw.sequence.key_frame().clone();
    let params = cfg.slic.clone().unwrap_or_else(|| SlicParams::for_area(image.len()));
    let partition = slic(&image, &params).map_err(|source| DatasetError::Superpixel {
        name: raw.name.clone(),
        source,
    })?;
    Ok(Sample {
        name: raw.name.clone(),
        image,
        truth: raw.truth.clone(),
        vesselness: pl.vesselness,
        pseudo: pl.labels,
        partition,
    })
}

impl Dataset {
    /// Pseudo labels and superpixels for every sequence, in parallel.
    pub fn prepare(raw: &RawDataset, cfg: &PrepareConfig) -> Result<Dataset, DatasetError> {
        let all: Vec<&RawSample> = raw.splits().into_iter().flatten().collect();
        let mut prepared = par::try_map(&all, |r| prepare_sample(r, cfg))?.into_iter();
        Ok(Dataset {
            train: prepared.by_ref().take(raw.train.len()).collect(),
            val: prepared.by_ref().take(raw.val.len()).collect(),
            test: prepared.collect(),
        })
    }

    pub fn train_pixels(&self) -> usize {
        self.train.iter().map(|s| s.image.len()).sum()
    }
}
