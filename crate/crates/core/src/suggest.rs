//! Query selection, annotation sets and the annotator interface.
//!
//! Superpixel labels travel as run-length encodings over the superpixel's
//! member pixels in ascending raster order. Counts alternate starting with
//! a run of zeros, so a set that starts with foreground begins with `0`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, LabelGrid};
use crate::superpixel::SuperpixelPartition;
use crate::uncertainty::SuperpixelUncertainty;

#[derive(Debug, Error, PartialEq)]
pub enum SuggestError {
    #[error("superpixels already labeled: {0:?}")]
    AlreadyLabeled(Vec<u32>),
    #[error("superpixel {0} appears more than once")]
    DuplicateSuperpixel(u32),
    #[error("superpixel {id} does not exist (partition has {count})")]
    UnknownSuperpixel { id: u32, count: usize },
    #[error("superpixel {id} has {got} labels but {expected} pixels")]
    PartialSuperpixel { id: u32, expected: usize, got: usize },
    #[error("label {0} is not binary")]
    NonBinary(u8),
    #[error("annotation is for image {got}, expected {expected}")]
    WrongImage { expected: usize, got: usize },
    #[error("no ground truth for image {0}")]
    MissingTruth(usize),
    #[error("ground truth is {got:?}, partition is {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("run-length counts sum to {got}, expected {expected}")]
    BadRle { expected: usize, got: usize },
}

/// Superpixels queried for one image at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub image_id: usize,
    pub iteration: u32,
    pub superpixels: Vec<u32>,
    /// Uncertainty of each queried superpixel at query time.
    pub uncertainties: Vec<f64>,
}

impl QueryBatch {
    pub fn is_empty(&self) -> bool {
        self.superpixels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.superpixels.len()
    }
}

/// Ranks the unlabeled superpixels by uncertainty (descending, ties by
/// ascending id) and returns the first `n_b`.
pub fn select_queries(
    image_id: usize,
    iteration: u32,
    u: &SuperpixelUncertainty,
    labeled: &BTreeSet<u32>,
    n_b: usize,
) -> QueryBatch {
    let mut pool: Vec<u32> = (0..u.values.len() as u32).filter(|q| !labeled.contains(q)).collect();
    pool.sort_by(|&a, &b| {
        u.values[b as usize]
            .total_cmp(&u.values[a as usize])
            .then(a.cmp(&b))
    });
    pool.truncate(n_b);
    QueryBatch {
        image_id,
        iteration,
        uncertainties: pool.iter().map(|&q| u.values[q as usize]).collect(),
        superpixels: pool,
    }
}

/// Encodes binary labels as alternating run lengths starting with zeros.
pub fn rle_encode(labels: &[u8]) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for &l in labels {
        let l = u8::from(l != 0);
        if l != current {
            counts.push(run);
            current = l;
            run = 0;
        }
        run += 1;
    }
    if run > 0 {
        counts.push(run);
    }
    counts
}

pub fn rle_decode(counts: &[u32], expected_len: usize) -> Result<Vec<u8>, SuggestError> {
    let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    if total != expected_len as u64 {
        return Err(SuggestError::BadRle {
            expected: expected_len,
            got: total as usize,
        });
    }
    let mut out = Vec::with_capacity(expected_len);
    for (i, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
    }
    Ok(out)
}

/// Labels for one superpixel, in member order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelLabels {
    pub id: u32,
    pub labels: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct SuperpixelLabelsWire {
    id: u32,
    labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    pub image_id: usize,
    pub iteration: u32,
    pub superpixels: Vec<SuperpixelLabels>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationSetWire {
    image_id: usize,
    iteration: u32,
    superpixels: Vec<SuperpixelLabelsWire>,
}

impl Serialize for AnnotationSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        AnnotationSetWire {
            image_id: self.image_id,
            iteration: self.iteration,
            superpixels: self
                .superpixels
                .iter()
                .map(|sp| SuperpixelLabelsWire {
                    id: sp.id,
                    labels: rle_encode(&sp.labels),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AnnotationSet {
    /// Run lengths are expanded without a partition; [`AnnotationSet::validate`]
    /// checks the resulting lengths against the superpixel sizes.
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = AnnotationSetWire::deserialize(d)?;
        let superpixels = wire
            .superpixels
            .into_iter()
            .map(|sp| {
                let total: usize = sp.labels.iter().map(|&c| c as usize).sum();
                let labels = rle_decode(&sp.labels, total).map_err(serde::de::Error::custom)?;
                Ok(SuperpixelLabels { id: sp.id, labels })
            })
            .collect::<Result<_, D::Error>>()?;
        Ok(AnnotationSet {
            image_id: wire.image_id,
            iteration: wire.iteration,
            superpixels,
        })
    }
}

impl AnnotationSet {
    pub fn empty(image_id: usize, iteration: u32) -> Self {
        Self {
            image_id,
            iteration,
            superpixels: Vec::new(),
        }
    }

    pub fn ids(&self) -> Vec<u32> {
        self.superpixels.iter().map(|s| s.id).collect()
    }

    /// Checks ids are distinct, exist in `partition`, cover whole
    /// superpixels and carry binary labels.
    pub fn validate(&self, partition: &SuperpixelPartition) -> Result<(), SuggestError> {
        let mut seen = BTreeSet::new();
        for sp in &self.superpixels {
            if !seen.insert(sp.id) {
                return Err(SuggestError::DuplicateSuperpixel(sp.id));
            }
            if sp.id as usize >= partition.n_superpixels() {
                return Err(SuggestError::UnknownSuperpixel {
                    id: sp.id,
                    count: partition.n_superpixels(),
                });
            }
            let expected = partition.size(sp.id as usize);
            if sp.labels.len() != expected {
                return Err(SuggestError::PartialSuperpixel {
                    id: sp.id,
                    expected,
                    got: sp.labels.len(),
                });
            }
            if let Some(&bad) = sp.labels.iter().find(|&&l| l > 1) {
                return Err(SuggestError::NonBinary(bad));
            }
        }
        Ok(())
    }
}

/// Answers a batch with the ground truth of each queried superpixel.
pub fn oracle_annotate(
    batch: &QueryBatch,
    truth: Option<&LabelGrid>,
    partition: &SuperpixelPartition,
) -> Result<AnnotationSet, SuggestError> {
    if batch.is_empty() {
        return Ok(AnnotationSet::empty(batch.image_id, batch.iteration));
    }
    let truth = truth.ok_or(SuggestError::MissingTruth(batch.image_id))?;
    if truth.dims() != partition.dims() {
        return Err(SuggestError::DimensionMismatch {
            expected: partition.dims(),
            got: truth.dims(),
        });
    }
    let superpixels = batch
        .superpixels
        .iter()
        .map(|&id| {
            if id as usize >= partition.n_superpixels() {
                return Err(SuggestError::UnknownSuperpixel {
                    id,
                    count: partition.n_superpixels(),
                });
            }
            Ok(SuperpixelLabels {
                id,
                labels: partition
                    .members(id as usize)
                    .iter()
                    .map(|&p| truth.get(p as usize))
                    .collect(),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(AnnotationSet {
        image_id: batch.image_id,
        iteration: batch.iteration,
        superpixels,
    })
}

/// Labeled superpixels of one image (Q*) with their pixel labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationStore {
    labels: BTreeMap<u32, Vec<u8>>,
}

impl AnnotationStore {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.labels.contains_key(&id)
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.labels.keys().copied().collect()
    }

    pub fn labels(&self, id: u32) -> Option<&[u8]> {
        self.labels.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[u8])> {
        self.labels.iter().map(|(&k, v)| (k, v.as_slice()))
    }
}

/// Adds `new` to `store`. Fails without modifying the store if any
/// superpixel is already present or repeated within `new`.
pub fn merge_annotations(store: &mut AnnotationStore, new: &AnnotationSet) -> Result<(), SuggestError> {
    let mut seen = BTreeSet::new();
    for sp in &new.superpixels {
        if !seen.insert(sp.id) {
            return Err(SuggestError::DuplicateSuperpixel(sp.id));
        }
    }
    let overlap: Vec<u32> = new.ids().into_iter().filter(|id| store.contains(*id)).collect();
    if !overlap.is_empty() {
        return Err(SuggestError::AlreadyLabeled(overlap));
    }
    for sp in &new.superpixels {
        store.labels.insert(sp.id, sp.labels.clone());
    }
    Ok(())
}

/// What an annotator gets to see for one training image.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    pub image: &'a GrayImage,
    pub partition: &'a SuperpixelPartition,
    /// Current self-paced labels.
    pub prediction: &'a LabelGrid,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotatorError {
    #[error("annotation aborted: {0}")]
    Aborted(String),
    #[error("annotator failed: {0}")]
    Failed(String),
}

/// Source of pixel labels for queried superpixels.
///
/// `contexts` is indexed by `image_id`. The reply must contain exactly one
/// set per batch, covering that batch's superpixels.
pub trait Annotator: Send {
    fn annotate(
        &mut self,
        batches: &[QueryBatch],
        contexts: &[QueryContext<'_>],
    ) -> Result<Vec<AnnotationSet>, AnnotatorError>;
}

/// Answers every query from ground truth.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    truths: Vec<Option<LabelGrid>>,
}

impl OracleAnnotator {
    /// `truths[i]` is the ground truth of training image `i`.
    pub fn new(truths: Vec<Option<LabelGrid>>) -> Self {
        Self { truths }
    }
}

impl Annotator for OracleAnnotator {
    fn annotate(
        &mut self,
        batches: &[QueryBatch],
        contexts: &[QueryContext<'_>],
    ) -> Result<Vec<AnnotationSet>, AnnotatorError> {
        batches
            .iter()
            .map(|b| {
                let truth = self.truths.get(b.image_id).and_then(Option::as_ref);
                let ctx = contexts
                    .get(b.image_id)
                    .ok_or_else(|| AnnotatorError::Failed(format!("no context for image {}", b.image_id)))?;
                oracle_annotate(b, truth, ctx.partition).map_err(|e| AnnotatorError::Failed(e.to_string()))
            })
            .collect()
    }
}

/// Checks that `sets` answers `batches` one-to-one with matching ids.
pub fn check_reply(batches: &[QueryBatch], sets: &[AnnotationSet]) -> Result<(), AnnotatorError> {
    if batches.len() != sets.len() {
        return Err(AnnotatorError::Failed(format!(
            "{} annotation sets for {} batches",
            sets.len(),
            batches.len()
        )));
    }
    for (b, s) in batches.iter().zip(sets) {
        let mut want = b.superpixels.clone();
        let mut got = s.ids();
        want.sort_unstable();
        got.sort_unstable();
        if b.image_id != s.image_id || want != got {
            return Err(AnnotatorError::Failed(format!(
                "annotation set for image {} does not match its batch",
                s.image_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unc(values: Vec<f64>) -> SuperpixelUncertainty {
        SuperpixelUncertainty { values }
    }

    #[test]
    fn select_example() {
        let u = unc(vec![0.9, 0.8, 0.7, 0.6]);
        let b = select_queries(0, 1, &u, &BTreeSet::from([0]), 2);
        assert_eq!(b.superpixels, vec![1, 2]);
        assert_eq!(b.uncertainties, vec![0.8, 0.7]);
        assert!(select_queries(0, 1, &u, &BTreeSet::new(), 0).is_empty());
        let flat = unc(vec![0.5; 6]);
        let b = select_queries(0, 1, &flat, &BTreeSet::from([1]), 3);
        assert_eq!(b.superpixels, vec![0, 2, 3]);
        let b = select_queries(0, 1, &u, &BTreeSet::from([0, 1, 2]), 5);
        assert_eq!(b.superpixels, vec![3]);
    }

    #[test]
    fn rle_round_trip() {
        for labels in [vec![], vec![0], vec![1], vec![0, 0, 1, 1, 1, 0], vec![1, 1, 0]] {
            let c = rle_encode(&labels);
            assert_eq!(rle_decode(&c, labels.len()).unwrap(), labels);
        }
        assert_eq!(rle_encode(&[0, 0, 1, 1, 1, 0]), vec![2, 3, 1]);
        assert_eq!(rle_encode(&[1, 1]), vec![0, 2]);
        assert!(rle_decode(&[2, 3], 4).is_err());
    }

    #[test]
    fn annotation_json_schema() {
        let set = AnnotationSet {
            image_id: 3,
            iteration: 2,
            superpixels: vec![SuperpixelLabels {
                id: 7,
                labels: vec![1, 1, 0],
            }],
        };
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(json, r#"{"image_id":3,"iteration":2,"superpixels":[{"id":7,"labels":[0,2,1]}]}"#);
        let back: AnnotationSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn merge_rules() {
        let mk = |ids: &[u32]| AnnotationSet {
            image_id: 0,
            iteration: 1,
            superpixels: ids.iter().map(|&id| SuperpixelLabels { id, labels: vec![0] }).collect(),
        };
        let mut store = AnnotationStore::default();
        merge_annotations(&mut store, &mk(&[0, 1, 2, 3, 4, 5, 6, 7])).unwrap();
        merge_annotations(&mut store, &mk(&[8, 9, 10, 11, 12])).unwrap();
        assert_eq!(store.len(), 13);
        let before = store.clone();
        assert_eq!(
            merge_annotations(&mut store, &mk(&[12, 13])),
            Err(SuggestError::AlreadyLabeled(vec![12]))
        );
        assert_eq!(store, before);
        merge_annotations(&mut store, &mk(&[])).unwrap();
        assert_eq!(store, before);
        assert!(merge_annotations(&mut store, &mk(&[20, 20])).is_err());
    }

    #[test]
    fn oracle_copies_truth() {
        let p = SuperpixelPartition::from_assignment(4, 1, vec![0, 0, 1, 1]);
        let truth = LabelGrid::new(4, 1, vec![1, 0, 0, 1]).unwrap();
        let b = QueryBatch {
            image_id: 0,
            iteration: 1,
            superpixels: vec![1],
            uncertainties: vec![0.3],
        };
        let set = oracle_annotate(&b, Some(&truth), &p).unwrap();
        assert_eq!(set.superpixels, vec![SuperpixelLabels { id: 1, labels: vec![0, 1] }]);
        assert!(set.validate(&p).is_ok());
        assert_eq!(oracle_annotate(&b, None, &p), Err(SuggestError::MissingTruth(0)));
        let empty = QueryBatch {
            superpixels: vec![],
            uncertainties: vec![],
            ..b
        };
        assert!(oracle_annotate(&empty, None, &p).unwrap().superpixels.is_empty());
    }

    #[test]
    fn validate_rejects_partial() {
        let p = SuperpixelPartition::from_assignment(4, 1, vec![0, 0, 1, 1]);
        let set = AnnotationSet {
            image_id: 0,
            iteration: 1,
            superpixels: vec![SuperpixelLabels { id: 0, labels: vec![1] }],
        };
        assert!(matches!(set.validate(&p), Err(SuggestError::PartialSuperpixel { .. })));
    }
}
