#[path = "../tests/support/client.rs"]
mod client;

use arspl_core::dataset::{synthetic_dataset, write_dataset, PrepareConfig};
use arspl_core::image::LabelGrid;
use arspl_core::segmodel::TrainHyper;
use arspl_core::spl::{Mode, RunReport, SplConfig};
use arspl_core::suggest::{AnnotationSet, SuperpixelLabels};
use arspl_core::superpixel::SlicParams;
use reqwest::StatusCode;
use serde_json::{json, Value};

use self::client::{oracle_answers, Client};
use crate::api;
use crate::config::{oracle_for, run_to_dir, RunConfig};
use crate::session::{Phase, SessionManager};

struct Fixture {
    root: tempfile::TempDir,
    body: Value,
    truths: Vec<LabelGrid>,
    oracle: RunReport,
}

fn tiny_spl(mode: Mode) -> SplConfig {
    SplConfig {
        mode,
        n_b: 2,
        max_alt_iters: 3,
        mcdo_passes: 4,
        widths: [4, 8, 8],
        hyper: TrainHyper {
            lr0: 0.03,
            batch: 2,
            max_steps: 15,
            ..TrainHyper::default()
        },
        warm_start: Some(TrainHyper {
            lr0: 0.1,
            batch: 2,
            max_steps: 40,
            ..TrainHyper::default()
        }),
        baseline_steps: 40,
        ..SplConfig::default()
    }
}

fn fixture(mode: Mode) -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let raw = synthetic_dataset(11, [3, 2, 2], 32, 32).unwrap();
    let manifest = write_dataset(&raw, &root.path().join("data")).unwrap();
    let cfg = RunConfig {
        manifest: manifest.clone(),
        seed: 1,
        spl: tiny_spl(mode),
        prepare: PrepareConfig {
            slic: Some(SlicParams {
                target_count: 64,
                ..SlicParams::for_area(1)
            }),
            ..PrepareConfig::default()
        },
    };
    let dataset = cfg.load_dataset().unwrap();
    let oracle_dir = tempfile::tempdir().unwrap();
    let oracle = run_to_dir(&cfg, &dataset, &mut oracle_for(&dataset), oracle_dir.path()).unwrap();
    let body = json!({
        "manifest": manifest.strip_prefix(root.path()).unwrap(),
        "seed": cfg.seed,
        "spl": cfg.spl,
        "prepare": cfg.prepare,
    });
    Fixture {
        truths: dataset.train.iter().map(|s| s.truth.clone().unwrap()).collect(),
        root,
        body,
        oracle,
    }
}

fn start(root: &std::path::Path) -> Client {
    let manager = SessionManager::open(root).unwrap();
    Client::new(api::spawn(manager, "127.0.0.1:0".parse().unwrap()).unwrap())
}

#[test]
fn interactive_session_reproduces_oracle_run() {
    let f = fixture(Mode::Arspl);
    let c = start(f.root.path());
    let id = c.create(&f.body);
    assert_eq!(c.get("/sessions").1, json!([id]));
    let s = c.wait_phase(&id, &[Phase::AwaitingAnnotations]);
    assert_eq!(s.iteration, 0);
    assert_eq!(c.get(&format!("/sessions/{id}/report")).0, StatusCode::CONFLICT);

    let q = c.queries(&id);
    assert_eq!(q.iteration, 1);
    assert_eq!(q.remaining, q.batches.len());
    let b = &q.batches[0];
    assert!(b.superpixels.iter().all(|sp| sp.pixels.windows(2).all(|w| w[0] < w[1])));
    assert!(b.superpixels.windows(2).all(|w| w[0].uncertainty >= w[1].uncertainty));
    let sets = oracle_answers(&q, &f.truths);
    let path = format!("/sessions/{id}/annotations");

    let mut wrong_iter = sets[0].clone();
    wrong_iter.iteration += 1;
    let mut missing = sets[0].clone();
    missing.superpixels.pop();
    let mut short = sets[0].clone();
    short.superpixels[0].labels.pop();
    let mut stranger = sets[0].clone();
    stranger.image_id = 99;
    let mut extra = sets[0].clone();
    extra.superpixels.push(SuperpixelLabels {
        id: 10_000,
        labels: vec![0],
    });
    for bad in [&wrong_iter, &missing, &short, &stranger, &extra] {
        assert_eq!(c.submit(&id, bad).0, StatusCode::UNPROCESSABLE_ENTITY, "{bad:?}");
    }
    assert_eq!(c.post_raw(&path, "{\"image_id\": 0"), StatusCode::UNPROCESSABLE_ENTITY);

    let (code, ack) = c.submit(&id, &sets[0]);
    assert_eq!(code, StatusCode::OK);
    assert_eq!(ack["remaining"], json!(sets.len() - 1));
    assert_eq!(c.submit(&id, &sets[0]).0, StatusCode::CONFLICT);
    assert!(c.queries(&id).batches[0].answered);
    for set in &sets[1..] {
        assert_eq!(c.submit(&id, set).0, StatusCode::OK);
    }

    let report = c.drive(&id, &f.truths);
    assert_eq!(report, f.oracle);
    assert_eq!(c.get(&format!("/sessions/{id}/queries")).0, StatusCode::CONFLICT);
    assert_eq!(c.submit(&id, &sets[0]).0, StatusCode::CONFLICT);
    assert_eq!(c.post(&format!("/sessions/{id}/suspend"), &json!({})).0, StatusCode::CONFLICT);

    let (code, overlay) = c.get(&format!("/sessions/{id}/overlay/0"));
    assert_eq!(code, StatusCode::OK);
    assert_eq!((overlay["width"].clone(), overlay["height"].clone()), (json!(32), json!(32)));
    assert_eq!(c.status(&id).annotated_superpixels, report.annotated_superpixels);
    assert_eq!(c.get(&format!("/sessions/{id}/overlay/7")).0, StatusCode::NOT_FOUND);

    let saved: RunReport =
        serde_json::from_slice(&std::fs::read(f.root.path().join("sessions").join(&id).join("report.json")).unwrap())
            .unwrap();
    assert_eq!(saved, f.oracle);
}

#[test]
fn suspend_restart_and_resume_reproduce_oracle_run() {
    let f = fixture(Mode::Arspl);
    let c = start(f.root.path());
    let id = c.create(&f.body);
    c.wait_phase(&id, &[Phase::AwaitingAnnotations]);
    c.answer_all(&id, &f.truths);
    let s = c.wait_phase(&id, &[Phase::AwaitingAnnotations]);
    assert_eq!(s.iteration, 1);
    let before = c.queries(&id);

    let (code, reply) = c.post(&format!("/sessions/{id}/suspend"), &json!({}));
    assert_eq!(code, StatusCode::OK, "{reply}");
    c.wait_phase(&id, &[Phase::Suspended]);
    assert_eq!(c.get(&format!("/sessions/{id}/queries")).0, StatusCode::CONFLICT);
    assert_eq!(c.submit(&id, &oracle_answers(&before, &f.truths)[0]).0, StatusCode::CONFLICT);

    // A fresh process sees the session but leaves it suspended.
    let c = start(f.root.path());
    std::thread::sleep(std::time::Duration::from_millis(200));
    assert_eq!(c.status(&id).phase, Phase::Suspended);
    let (code, _) = c.post(&format!("/sessions/{id}/resume"), &json!({}));
    assert_eq!(code, StatusCode::OK);
    c.wait_phase(&id, &[Phase::AwaitingAnnotations]);
    let after = c.queries(&id);
    assert_eq!(serde_json::to_value(&after).unwrap(), serde_json::to_value(&before).unwrap());
    assert_eq!(c.post(&format!("/sessions/{id}/resume"), &json!({})).0, StatusCode::CONFLICT);

    // A crash while awaiting restarts the session on the next start-up.
    let c = start(f.root.path());
    let s = c.wait_phase(&id, &[Phase::AwaitingAnnotations]);
    assert_eq!(s.iteration, 1);
    assert_eq!(c.drive(&id, &f.truths), f.oracle);
}

#[test]
fn baseline_session_needs_no_annotations() {
    let f = fixture(Mode::Ns);
    let c = start(f.root.path());
    let id = c.create(&f.body);
    assert_eq!(c.drive(&id, &f.truths), f.oracle);
    assert_eq!(c.status(&id).mode, Mode::Ns);
}

#[test]
fn malformed_requests_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let c = start(root.path());
    for body in [
        json!({"manifest": "missing.json", "seed": 1}),
        json!({"manifest": "missing.json", "seed": 1, "colour": "red"}),
        json!({"seed": 1}),
    ] {
        let (code, v) = c.post("/sessions", &body);
        assert_eq!(code, StatusCode::BAD_REQUEST, "{body}");
        assert!(v["error"].is_string());
    }
    let raw = synthetic_dataset(3, [1, 1, 1], 16, 16).unwrap();
    let manifest = write_dataset(&raw, &root.path().join("d")).unwrap();
    let mut spl = tiny_spl(Mode::Arspl);
    spl.theta = 0.0;
    let (code, _) = c.post("/sessions", &json!({"manifest": manifest, "seed": 1, "spl": spl}));
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(c.get("/sessions/nope").0, StatusCode::NOT_FOUND);
    assert_eq!(c.get("/sessions/nope/queries").0, StatusCode::NOT_FOUND);
    let set = AnnotationSet::empty(0, 1);
    assert_eq!(
        c.post("/sessions/nope/annotations", &serde_json::to_value(set).unwrap()).0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(c.get("/sessions").1, json!([]));
}

#[test]
fn failed_session_reports_error() {
    let root = tempfile::tempdir().unwrap();
    let manager = SessionManager::open(root.path()).unwrap();
    let cfg = RunConfig::from_preset(root.path().join("gone.json"), 1, Mode::Arspl, Default::default());
    let s = manager.create(cfg).unwrap();
    let phase = s.wait_for(std::time::Duration::from_secs(60), |g| g.phase == Phase::Failed);
    assert_eq!(phase, Phase::Failed);
    assert!(s.lock().error.is_some());
}
