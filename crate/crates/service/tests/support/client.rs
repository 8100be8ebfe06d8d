//! Blocking HTTP client that plays the annotator against a running service,
//! labelling every queried pixel from ground truth.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use arspl_core::image::LabelGrid;
use arspl_core::spl::RunReport;
use arspl_core::suggest::{AnnotationSet, SuperpixelLabels};
use arspl_service::api::{Queries, Status};
use arspl_service::session::Phase;
use reqwest::StatusCode;
use serde_json::Value;

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(addr: std::net::SocketAddr) -> Self {
        Self {
            base: format!("http://{addr}"),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client"),
        }
    }

    pub fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().expect("GET");
        (r.status(), r.json().unwrap_or(Value::Null))
    }

    pub fn post(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .expect("POST");
        (r.status(), r.json().unwrap_or(Value::Null))
    }

    pub fn post_raw(&self, path: &str, body: &'static str) -> StatusCode {
        self.http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .expect("POST")
            .status()
    }

    pub fn create(&self, body: &Value) -> String {
        let (code, v) = self.post("/sessions", body);
        assert_eq!(code, StatusCode::OK, "{v}");
        v["id"].as_str().expect("id").to_string()
    }

    pub fn status(&self, id: &str) -> Status {
        let (code, v) = self.get(&format!("/sessions/{id}"));
        assert_eq!(code, StatusCode::OK, "{v}");
        serde_json::from_value(v).expect("status")
    }

    /// Polls until the phase is one of `phases`.
    pub fn wait_phase(&self, id: &str, phases: &[Phase]) -> Status {
        let deadline = Instant::now() + Duration::from_secs(600);
        loop {
            let s = self.status(id);
            if phases.contains(&s.phase) {
                return s;
            }
            assert!(
                Instant::now() < deadline && s.phase != Phase::Failed,
                "session stuck in {:?}: {:?}",
                s.phase,
                s.error
            );
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn queries(&self, id: &str) -> Queries {
        let (code, v) = self.get(&format!("/sessions/{id}/queries"));
        assert_eq!(code, StatusCode::OK, "{v}");
        serde_json::from_value(v).expect("queries")
    }

    pub fn submit(&self, id: &str, set: &AnnotationSet) -> (StatusCode, Value) {
        self.post(&format!("/sessions/{id}/annotations"), &serde_json::to_value(set).unwrap())
    }

    /// Answers the outstanding queries one image at a time, superpixels in
    /// reverse order.
    pub fn answer_all(&self, id: &str, truths: &[LabelGrid]) {
        for set in oracle_answers(&self.queries(id), truths) {
            let (code, v) = self.submit(id, &set);
            assert_eq!(code, StatusCode::OK, "{v}");
        }
    }

    /// Answers every query until the session converges and returns its report.
    pub fn drive(&self, id: &str, truths: &[LabelGrid]) -> RunReport {
        loop {
            let s = self.wait_phase(id, &[Phase::AwaitingAnnotations, Phase::Converged]);
            if s.phase == Phase::Converged {
                break;
            }
            self.answer_all(id, truths);
        }
        let (code, v) = self.get(&format!("/sessions/{id}/report"));
        assert_eq!(code, StatusCode::OK, "{v}");
        serde_json::from_value(v).expect("report")
    }
}

pub fn oracle_answers(q: &Queries, truths: &[LabelGrid]) -> Vec<AnnotationSet> {
    q.batches
        .iter()
        .filter(|b| !b.answered)
        .map(|b| AnnotationSet {
            image_id: b.image_id,
            iteration: b.iteration,
            superpixels: b
                .superpixels
                .iter()
                .rev()
                .map(|sp| SuperpixelLabels {
                    id: sp.id,
                    labels: sp.pixels.iter().map(|&p| truths[b.image_id].labels()[p as usize]).collect(),
                })
                .collect(),
        })
        .collect()
}
