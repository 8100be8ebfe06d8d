use arspl_core::image::{GrayImage, LabelGrid};
use arspl_core::metrics::evaluate_mask;
use arspl_core::par;
use arspl_core::rng;
use arspl_core::segmodel::*;
use proptest::prelude::*;
use rand::Rng;

fn toy_image(w: usize, h: usize, seed: u64) -> (GrayImage, LabelGrid) {
    let mut r = rng::stream(seed, &[99]);
    let labels = LabelGrid::from_fn(w, h, |i| {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        (y - 0.6 * x - 2.0).abs() < 1.5 || (x - w as f64 * 0.7).abs() < 1.0
    });
    let data = (0..w * h)
        .map(|i| (0.7 - 0.35 * f64::from(labels.get(i)) + 0.05 * rng::normal(&mut r)).clamp(0.0, 1.0))
        .collect();
    (GrayImage::new(w, h, data).unwrap(), labels)
}

fn hyper(steps: usize) -> TrainHyper {
    TrainHyper {
        lr0: 0.1,
        momentum: 0.9,
        batch: 4,
        max_steps: steps,
        lr_power: 0.9,
        lambda: 1e-4,
    }
}

#[test]
fn init_is_deterministic_and_seed_dependent() {
    let a = init_model(3, 0.2, DEFAULT_WIDTHS).unwrap();
    let b = init_model(3, 0.2, DEFAULT_WIDTHS).unwrap();
    let c = init_model(4, 0.2, DEFAULT_WIDTHS).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.flat_params(), c.flat_params());
    assert!(init_model(1, 0.2, [8, 0, 4]).is_err());
    assert!(init_model(1, 1.0, DEFAULT_WIDTHS).is_err());
}

#[test]
fn fresh_model_predicts_near_half() {
    let (img, _) = toy_image(32, 32, 1);
    for seed in 0..10 {
        let m = init_model(seed, 0.2, DEFAULT_WIDTHS).unwrap();
        let p = predict_proba(&m, &img);
        let mean = p.values().iter().sum::<f64>() / p.values().len() as f64;
        assert!((mean - 0.5).abs() < 0.2, "seed {seed}: mean {mean}");
    }
}

#[test]
fn probabilities_normalised_and_deterministic() {
    let (img, _) = toy_image(20, 12, 2);
    let m = init_model(5, 0.2, DEFAULT_WIDTHS).unwrap();
    let a = predict_proba(&m, &img);
    let b = predict_proba(&m, &img);
    assert_eq!(a, b);
    assert_eq!(a.dims(), (20, 12));
    for i in 0..a.values().len() {
        let (fg, bg) = (a.values()[i], a.background(i));
        assert!((0.0..=1.0).contains(&fg));
        assert!((fg + bg - 1.0).abs() < 1e-6);
    }
}

#[test]
fn odd_sizes_are_padded_and_cropped() {
    let (img, _) = toy_image(13, 7, 3);
    let m = init_model(5, 0.2, DEFAULT_WIDTHS).unwrap();
    assert_eq!(predict_binary(&m, &img).dims(), (13, 7));
    assert_eq!(mcdo_expectation(&m, &img, 3, 1).dims(), (13, 7));
    let (img1, _) = toy_image(1, 1, 3);
    assert_eq!(predict_proba(&m, &img1).values().len(), 1);
}

#[test]
fn binarize_threshold_rule() {
    assert_eq!(binarize_prob(0.7), 1);
    assert_eq!(binarize_prob(0.3), 0);
    assert_eq!(binarize_prob(0.5), 1);
}

proptest! {
    #[test]
    fn binarize_is_cross_entropy_argmin(p in 0.0f64..=1.0) {
        let ce = |y: u8| if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
        let best = if ce(1) <= ce(0) { 1 } else { 0 };
        prop_assert_eq!(binarize_prob(p), best);
    }
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let (img, labels) = toy_image(16, 16, 4);
    let weights = vec![0.0; 256];
    let m = init_model(9, 0.2, DEFAULT_WIDTHS).unwrap();
    let s = [TrainSample {
        image: &img,
        labels: &labels,
        weights: &weights,
    }];
    let h = TrainHyper { lambda: 0.0, ..hyper(5) };
    let out = train_weighted(&m, &s, &h).unwrap();
    assert_eq!(out.model.flat_params(), m.flat_params());
    assert_eq!(out.model.step_count(), 5);
}

#[test]
fn doubling_weights_doubles_gradient() {
    let (img, labels) = toy_image(16, 16, 5);
    let mut r = rng::stream(5, &[7]);
    let w1: Vec<f64> = (0..256).map(|_| r.random::<f64>()).collect();
    let w2: Vec<f64> = w1.iter().map(|w| 2.0 * w).collect();
    let m = init_model(9, 0.0, DEFAULT_WIDTHS).unwrap();
    let g1 = objective(&m, &[TrainSample { image: &img, labels: &labels, weights: &w1 }], 0.0)
        .unwrap()
        .gradient
        .flat();
    let g2 = objective(&m, &[TrainSample { image: &img, labels: &labels, weights: &w2 }], 0.0)
        .unwrap()
        .gradient
        .flat();
    let num: f64 = g2.iter().zip(&g1).map(|(a, b)| (a - 2.0 * b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = g1.iter().map(|b| (2.0 * b).powi(2)).sum::<f64>().sqrt();
    assert!(num / den < 1e-6, "{}", num / den);
}

#[test]
fn gradient_matches_finite_differences() {
    let (img, labels) = toy_image(8, 8, 6);
    let mut r = rng::stream(6, &[8]);
    let weights: Vec<f64> = (0..64).map(|_| r.random::<f64>() * 2.0).collect();
    let mut m = init_model(11, 0.0, [4, 4, 4]).unwrap();
    // Non-zero biases so every unit is exercised.
    let mut flat = m.flat_params();
    for v in &mut flat {
        *v += 0.05 * rng::normal(&mut r);
    }
    m.set_flat_params(&flat);
    let samples = [TrainSample {
        image: &img,
        labels: &labels,
        weights: &weights,
    }];
    let lambda = 1e-3;
    let g = objective(&m, &samples, lambda).unwrap().gradient.flat();
    let eval = |p: &[f64]| {
        let mut mm = m.clone();
        mm.set_flat_params(p);
        objective(&mm, &samples, lambda).unwrap().total()
    };
    let h = 1e-6;
    for k in 0..20 {
        let d: Vec<f64> = (0..flat.len()).map(|_| rng::normal(&mut r)).collect();
        let plus: Vec<f64> = flat.iter().zip(&d).map(|(p, d)| p + h * d).collect();
        let minus: Vec<f64> = flat.iter().zip(&d).map(|(p, d)| p - h * d).collect();
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        assert!(rel < 1e-4, "direction {k}: fd {fd} analytic {an} rel {rel}");
    }
}

#[test]
fn overfits_single_image() {
    let (img, labels) = toy_image(16, 16, 7);
    let weights = vec![1.0; 256];
    let m = init_model(1, 0.2, DEFAULT_WIDTHS).unwrap();
    let s = [TrainSample {
        image: &img,
        labels: &labels,
        weights: &weights,
    }];
    let out = train_weighted(&m, &s, &hyper(500)).unwrap();
    let first = out.losses[0];
    let last = objective(&out.model.with_dropout_rate(0.0).unwrap(), &s, 0.0).unwrap().data_loss;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
    let pred = predict_binary(&out.model, &img);
    let dice = evaluate_mask(&pred, &labels).unwrap().dice;
    assert!(dice >= 0.95, "dice {dice}");
}

#[test]
fn training_is_deterministic_across_worker_modes() {
    let (a, la) = toy_image(16, 16, 8);
    let (b, lb) = toy_image(16, 16, 9);
    let (c, lc) = toy_image(16, 16, 10);
    let w = vec![1.0; 256];
    let s = [
        TrainSample { image: &a, labels: &la, weights: &w },
        TrainSample { image: &b, labels: &lb, weights: &w },
        TrainSample { image: &c, labels: &lc, weights: &w },
    ];
    let m = init_model(2, 0.2, DEFAULT_WIDTHS).unwrap();
    let h = TrainHyper { batch: 2, ..hyper(6) };
    let x = train_weighted(&m, &s, &h).unwrap();
    par::set_parallel(false);
    let y = train_weighted(&m, &s, &h).unwrap();
    par::set_parallel(true);
    assert_eq!(x.model, y.model);
    assert_eq!(x.losses, y.losses);

    // Continuing from a checkpoint is reproducible.
    let first = train_weighted(&m, &s, &TrainHyper { max_steps: 3, ..h.clone() }).unwrap();
    let resumed = train_weighted(&first.model, &s, &TrainHyper { max_steps: 3, ..h.clone() }).unwrap();
    assert_eq!(resumed.model.step_count(), 6);
    let again = train_weighted(&first.model, &s, &TrainHyper { max_steps: 3, ..h }).unwrap();
    assert_eq!(resumed.model, again.model);
}

#[test]
fn rejects_bad_samples() {
    let (img, labels) = toy_image(8, 8, 1);
    let m = init_model(1, 0.2, DEFAULT_WIDTHS).unwrap();
    let neg = vec![-1.0; 64];
    let short = vec![1.0; 10];
    for w in [&neg, &short] {
        let s = [TrainSample { image: &img, labels: &labels, weights: w }];
        assert!(matches!(train_weighted(&m, &s, &hyper(1)), Err(ModelError::BadSample { .. })));
    }
    assert!(matches!(train_weighted(&m, &[], &hyper(1)), Err(ModelError::EmptyBatch)));
    let bad = TrainHyper { batch: 0, ..hyper(1) };
    let s = [TrainSample { image: &img, labels: &labels, weights: &short }];
    assert!(matches!(train_weighted(&m, &s, &bad), Err(ModelError::InvalidHyper(_))));
}

#[test]
fn diverging_training_reports_non_finite_loss() {
    let (img, labels) = toy_image(8, 8, 1);
    let w = vec![1.0; 64];
    let m = init_model(1, 0.0, DEFAULT_WIDTHS).unwrap();
    let s = [TrainSample { image: &img, labels: &labels, weights: &w }];
    let h = TrainHyper { lr0: 1e12, ..hyper(50) };
    assert!(matches!(train_weighted(&m, &s, &h), Err(ModelError::NonFiniteLoss { .. })));
}

#[test]
fn mcdo_without_dropout_is_binary() {
    let (img, _) = toy_image(16, 16, 11);
    let m = init_model(3, 0.0, DEFAULT_WIDTHS).unwrap();
    let e = mcdo_expectation(&m, &img, 20, 4);
    let det = predict_binary(&m, &img);
    for i in 0..256 {
        assert!(e.get(i) == 0.0 || e.get(i) == 1.0);
        assert_eq!(e.get(i), f64::from(det.get(i)));
    }
}

#[test]
fn mcdo_values_are_multiples_and_deterministic() {
    // A fresh model sits near 0.5, where dropout flips decisions.
    let (img, _) = toy_image(16, 16, 12);
    let m = init_model(3, 0.5, DEFAULT_WIDTHS).unwrap();
    let a = mcdo_expectation(&m, &img, 20, 4);
    par::set_parallel(false);
    let b = mcdo_expectation(&m, &img, 20, 4);
    par::set_parallel(true);
    assert_eq!(a, b);
    for v in a.values() {
        let k = v * 20.0;
        assert!((k - k.round()).abs() < 1e-12);
    }
    assert!(a.values().iter().any(|&v| v > 0.0 && v < 1.0), "dropout should cause disagreement");
    assert_ne!(a, mcdo_expectation(&m, &img, 20, 5));
}

#[test]
fn expectation_from_votes() {
    let e = ExpectationMap::from_votes(2, 1, 20, vec![15, 0]);
    assert_eq!(e.get(0), 0.75);
    assert_eq!(e.get(1), 0.0);
}

#[test]
fn checkpoint_round_trip() {
    let (img, labels) = toy_image(8, 8, 1);
    let w = vec![1.0; 64];
    let m0 = init_model(1, 0.2, DEFAULT_WIDTHS).unwrap();
    let s = [TrainSample { image: &img, labels: &labels, weights: &w }];
    let m = train_weighted(&m0, &s, &hyper(3)).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&m, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.step_count(), 3);

    let bytes = encode_checkpoint(&m);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
}
