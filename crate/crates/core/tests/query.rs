use std::collections::BTreeSet;

use arspl_core::image::{GrayImage, LabelGrid};
use arspl_core::layersep::VesselnessMap;
use arspl_core::segmodel::{init_model, mcdo_expectation, ExpectationMap};
use arspl_core::suggest::*;
use arspl_core::superpixel::SuperpixelPartition;
use arspl_core::uncertainty::*;
use proptest::prelude::*;

fn expectation(passes: u32, votes: Vec<u32>, w: usize) -> ExpectationMap {
    let h = votes.len() / w;
    ExpectationMap::from_votes(w, h, passes, votes[..w * h].to_vec())
}

fn in_unit(v: &[f64]) -> bool {
    v.iter().all(|x| (0.0..=1.0).contains(x))
}

fn stripes(w: usize, h: usize, n: u32) -> SuperpixelPartition {
    SuperpixelPartition::from_assignment(w, h, (0..w * h).map(|i| (i % w) as u32 * n / w as u32).collect())
}

proptest! {
    #[test]
    fn uncertainty_maps_lie_in_unit_interval(
        passes in 1u32..30,
        raw in prop::collection::vec(0u32..1000, 4..64),
        s in prop::collection::vec(0.0f64..=1.0, 16),
        eta in 0.0f64..=1.0,
    ) {
        let votes: Vec<u32> = raw.iter().map(|v| v % (passes + 1)).collect();
        let e = expectation(passes, votes, 2);
        for form in [EntropyForm::Single, EntropyForm::Full] {
            prop_assert!(in_unit(model_uncertainty(&e, form).values()));
        }
        let g = vesselness_uncertainty(&VesselnessMap::new(4, 4, s));
        prop_assert!(in_unit(g.values()));
        let m = model_uncertainty_values(4, 4, &[0.3; 16], EntropyForm::Single, 2.0);
        let u = fuse_mvu(&m, &g, eta, &stripes(4, 4, 2)).unwrap();
        prop_assert!(in_unit(&u.values));
    }

    #[test]
    fn model_uncertainty_ignores_log_base(
        e in prop::collection::vec(0.0f64..=1.0, 1..50),
        base in prop_oneof![Just(2.0), Just(10.0), 1.1f64..20.0],
    ) {
        for form in [EntropyForm::Single, EntropyForm::Full] {
            let a = model_uncertainty_values(e.len(), 1, &e, form, std::f64::consts::E);
            let b = model_uncertainty_values(e.len(), 1, &e, form, base);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vesselness_uncertainty_peaks_at_midpoint(s in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let mut with_mid = s.clone();
        with_mid.push(0.5);
        let g = vesselness_uncertainty(&VesselnessMap::new(with_mid.len(), 1, with_mid.clone()));
        let last = *g.values().last().unwrap();
        prop_assert_eq!(last, 1.0);
        for (&v, &gv) in with_mid.iter().zip(g.values()) {
            if v != 0.5 {
                prop_assert!(gv < 1.0);
            }
        }
    }

    #[test]
    fn queries_are_top_k_and_disjoint(
        u in prop::collection::vec(0.0f64..=1.0, 1..60),
        labeled in prop::collection::btree_set(0u32..60, 0..20),
        n_b in 0usize..12,
        scale in 0.01f64..100.0,
    ) {
        let su = SuperpixelUncertainty { values: u.clone() };
        let batch = select_queries(0, 1, &su, &labeled, n_b);
        let pool: Vec<u32> = (0..u.len() as u32).filter(|q| !labeled.contains(q)).collect();
        prop_assert_eq!(batch.len(), n_b.min(pool.len()));
        let chosen: BTreeSet<u32> = batch.superpixels.iter().copied().collect();
        prop_assert_eq!(chosen.len(), batch.len());
        prop_assert!(chosen.is_disjoint(&labeled));
        let floor = batch.superpixels.iter().map(|&q| u[q as usize]).fold(f64::INFINITY, f64::min);
        for q in pool.iter().filter(|q| !chosen.contains(q)) {
            prop_assert!(u[*q as usize] <= floor);
        }
        let scaled = SuperpixelUncertainty { values: u.iter().map(|v| v * scale).collect() };
        prop_assert_eq!(select_queries(0, 1, &scaled, &labeled, n_b).superpixels, batch.superpixels);
    }

    #[test]
    fn rle_round_trips(labels in prop::collection::vec(0u8..=1, 0..200)) {
        let counts = rle_encode(&labels);
        prop_assert_eq!(rle_decode(&counts, labels.len()).unwrap(), labels);
    }

    #[test]
    fn annotation_json_round_trips(
        sets in prop::collection::vec((0u32..500, prop::collection::vec(0u8..=1, 1..50)), 0..6),
        image_id in 0usize..100,
        iteration in 1u32..20,
    ) {
        let set = AnnotationSet {
            image_id,
            iteration,
            superpixels: sets.into_iter().map(|(id, labels)| SuperpixelLabels { id, labels }).collect(),
        };
        let json = serde_json::to_string(&set).unwrap();
        prop_assert_eq!(serde_json::from_str::<AnnotationSet>(&json).unwrap(), set);
    }
}

#[test]
fn ties_break_by_ascending_id() {
    let su = SuperpixelUncertainty {
        values: vec![0.5, 0.9, 0.5, 0.9, 0.1],
    };
    let b = select_queries(2, 3, &su, &BTreeSet::from([1]), 3);
    assert_eq!(b.superpixels, vec![3, 0, 2]);
    assert_eq!(b.uncertainties, vec![0.9, 0.5, 0.5]);
    assert_eq!((b.image_id, b.iteration), (2, 3));
}

#[test]
fn deterministic_model_has_zero_uncertainty() {
    let model = init_model(3, 0.0, [4, 4, 4]).unwrap();
    let image = GrayImage::new(12, 12, (0..144).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    let e = mcdo_expectation(&model, &image, 10, 1);
    for form in [EntropyForm::Single, EntropyForm::Full] {
        let m = model_uncertainty(&e, form);
        assert!(m.values().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fusion_extremes_pick_one_source() {
    let partition = stripes(6, 4, 3);
    let m = model_uncertainty_values(6, 4, &(0..24).map(|i| i as f64 / 23.0).collect::<Vec<_>>(), EntropyForm::Full, 2.0);
    let g = vesselness_uncertainty(&VesselnessMap::new(6, 4, (0..24).map(|i| (i % 5) as f64 / 4.0).collect()));
    let mean = |map: &UncertaintyMap, q: usize| {
        let members = partition.members(q);
        members.iter().map(|&p| map.values()[p as usize]).sum::<f64>() / members.len() as f64
    };
    let only_g = fuse_mvu(&m, &g, 1.0, &partition).unwrap();
    let only_m = fuse_mvu(&m, &g, 0.0, &partition).unwrap();
    for q in 0..3 {
        assert!((only_g.values[q] - mean(&g, q)).abs() < 1e-12);
        assert!((only_m.values[q] - mean(&m, q)).abs() < 1e-12);
    }
    let wrong = vesselness_uncertainty(&VesselnessMap::new(4, 6, vec![0.5; 24]));
    assert!(matches!(
        fuse_mvu(&m, &wrong, 0.5, &partition),
        Err(UncertaintyError::DimensionMismatch { .. })
    ));
}

#[test]
fn oracle_answers_merge_once() {
    let partition = stripes(8, 2, 4);
    let truth = LabelGrid::from_fn(8, 2, |i| i % 3 == 0);
    let batch = select_queries(
        0,
        1,
        &SuperpixelUncertainty {
            values: vec![0.1, 0.8, 0.3, 0.9],
        },
        &BTreeSet::new(),
        2,
    );
    let set = oracle_annotate(&batch, Some(&truth), &partition).unwrap();
    assert_eq!(set.ids(), vec![3, 1]);
    set.validate(&partition).unwrap();
    for sp in &set.superpixels {
        let expected: Vec<u8> = partition.members(sp.id as usize).iter().map(|&p| truth.get(p as usize)).collect();
        assert_eq!(sp.labels, expected);
    }
    let mut store = AnnotationStore::default();
    merge_annotations(&mut store, &set).unwrap();
    assert_eq!(store.ids(), BTreeSet::from([1, 3]));
    assert!(merge_annotations(&mut store, &set).is_err());
    assert_eq!(store.len(), 2);
    assert!(matches!(
        oracle_annotate(&batch, None, &partition),
        Err(SuggestError::MissingTruth(0))
    ));
}

#[test]
fn reply_must_match_batches() {
    let partition = stripes(8, 2, 4);
    let truth = LabelGrid::zeros(8, 2);
    let su = SuperpixelUncertainty {
        values: vec![0.1, 0.8, 0.3, 0.9],
    };
    let batches = vec![select_queries(0, 1, &su, &BTreeSet::new(), 2)];
    let good = vec![oracle_annotate(&batches[0], Some(&truth), &partition).unwrap()];
    assert!(check_reply(&batches, &good).is_ok());
    assert!(check_reply(&batches, &[]).is_err());
    let mut short = good.clone();
    short[0].superpixels.pop();
    assert!(check_reply(&batches, &short).is_err());
}
