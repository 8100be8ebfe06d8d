//! Training sessions driven by a remote annotator.
//!
//! Each session owns a worker thread running the alternating loop. When the
//! loop asks for annotations, [`InteractiveAnnotator`] publishes the query
//! batches and blocks on the session's condition variable until HTTP
//! handlers have delivered an answer for every batch, or a suspend request
//! arrives. All session mutations happen under the session mutex.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};

use arspl_core::dataset::Dataset;
use arspl_core::image::LabelGrid;
use arspl_core::segmodel::SegModel;
use arspl_core::spl::{RunReport, SplError, SplRun, StepOutcome, TrainState};
use arspl_core::suggest::{AnnotationSet, Annotator, AnnotatorError, QueryBatch, QueryContext};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, REPORT_FILE, STATE_DIR};
use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    AwaitingAnnotations,
    Converged,
    Suspended,
    Failed,
}

/// Outstanding query batches of the current iteration.
#[derive(Debug, Clone)]
pub struct Pending {
    pub iteration: u32,
    pub batches: Vec<QueryBatch>,
    pub answers: Vec<Option<AnnotationSet>>,
    /// Self-paced labels of each batch's image when the queries were made.
    pub predictions: Vec<LabelGrid>,
}

impl Pending {
    pub fn remaining(&self) -> usize {
        self.answers.iter().filter(|a| a.is_none()).count()
    }
}

#[derive(Debug)]
pub struct Shared {
    pub phase: Phase,
    pub error: Option<String>,
    suspend: bool,
    worker_running: bool,
    pub iteration: u32,
    pub dice_history: Vec<f64>,
    /// Labeled superpixel ids per training image.
    pub annotated: Vec<BTreeSet<u32>>,
    pub dataset: Option<Arc<Dataset>>,
    pub model: Option<Arc<SegModel>>,
    pub pending: Option<Pending>,
    pub report: Option<RunReport>,
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    id: String,
    config: RunConfig,
    phase: Phase,
    error: Option<String>,
}

pub struct Session {
    pub id: String,
    pub config: RunConfig,
    dir: PathBuf,
    shared: Mutex<Shared>,
    wake: Condvar,
}

/// Rejection of a submitted annotation set.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SubmitError {
    #[error("session is {0:?}, not awaiting annotations")]
    WrongPhase(Phase),
    #[error("{0}")]
    Mismatch(String),
    #[error("image {0} was already annotated in this iteration")]
    Duplicate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SubmitAck {
    pub remaining: usize,
    pub phase: Phase,
}

impl Session {
    fn new(id: String, config: RunConfig, dir: PathBuf, phase: Phase, error: Option<String>) -> Self {
        Self {
            id,
            config,
            dir,
            shared: Mutex::new(Shared {
                phase,
                error,
                suspend: false,
                worker_running: false,
                iteration: 0,
                dice_history: Vec::new(),
                annotated: Vec::new(),
                dataset: None,
                model: None,
                pending: None,
                report: None,
            }),
            wake: Condvar::new(),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn persist(&self, g: &Shared) {
        let file = SessionFile {
            id: self.id.clone(),
            config: self.config.clone(),
            phase: g.phase,
            error: g.error.clone(),
        };
        let write = || -> Result<(), ServiceError> {
            let tmp = self.dir.join("session.json.tmp");
            std::fs::write(&tmp, serde_json::to_vec_pretty(&file)?)?;
            std::fs::rename(tmp, self.dir.join("session.json"))?;
            match &g.pending {
                Some(p) => std::fs::write(self.dir.join("pending.json"), serde_json::to_vec(&p.batches)?)?,
                None => {
                    let _ = std::fs::remove_file(self.dir.join("pending.json"));
                }
            }
            Ok(())
        };
        if let Err(e) = write() {
            log::error!("session {}: cannot persist: {e}", self.id);
        }
    }

    fn set_phase(&self, g: &mut Shared, phase: Phase) {
        g.phase = phase;
        self.persist(g);
        self.wake.notify_all();
    }

    /// Records one answer; the last answer of an iteration flips the phase
    /// back to training and wakes the worker.
    pub fn submit(&self, set: AnnotationSet) -> Result<SubmitAck, SubmitError> {
        let mut g = self.lock();
        if g.phase != Phase::AwaitingAnnotations {
            return Err(SubmitError::WrongPhase(g.phase));
        }
        let dataset = g.dataset.clone().expect("dataset is loaded while awaiting");
        let pending = g.pending.as_mut().expect("pending batches while awaiting");
        let idx = pending
            .batches
            .iter()
            .position(|b| b.image_id == set.image_id)
            .ok_or_else(|| SubmitError::Mismatch(format!("no pending batch for image {}", set.image_id)))?;
        let batch = &pending.batches[idx];
        if set.iteration != batch.iteration {
            return Err(SubmitError::Mismatch(format!(
                "iteration {} does not match pending iteration {}",
                set.iteration, batch.iteration
            )));
        }
        if pending.answers[idx].is_some() {
            return Err(SubmitError::Duplicate(set.image_id));
        }
        let partition = &dataset.train[set.image_id].partition;
        set.validate(partition).map_err(|e| SubmitError::Mismatch(e.to_string()))?;
        let mut by_id: BTreeMap<u32, _> = set.superpixels.into_iter().map(|sp| (sp.id, sp)).collect();
        let wanted: BTreeSet<u32> = batch.superpixels.iter().copied().collect();
        if by_id.keys().copied().collect::<BTreeSet<_>>() != wanted {
            return Err(SubmitError::Mismatch(format!(
                "expected superpixels {:?}, got {:?}",
                wanted,
                by_id.keys().collect::<Vec<_>>()
            )));
        }
        let ordered = AnnotationSet {
            image_id: set.image_id,
            iteration: set.iteration,
            superpixels: batch.superpixels.iter().map(|id| by_id.remove(id).expect("checked")).collect(),
        };
        pending.answers[idx] = Some(ordered);
        let remaining = pending.remaining();
        if remaining == 0 {
            self.set_phase(&mut g, Phase::Training);
        }
        Ok(SubmitAck {
            remaining,
            phase: g.phase,
        })
    }

    /// Asks the worker to stop at the next iteration boundary, or at once
    /// when it is waiting for annotations.
    pub fn request_suspend(&self) -> Phase {
        let mut g = self.lock();
        if matches!(g.phase, Phase::Training | Phase::AwaitingAnnotations) {
            g.suspend = true;
            self.wake.notify_all();
        }
        g.phase
    }

    fn publish(&self, g: &mut Shared, state: &TrainState) {
        g.iteration = state.iteration;
        g.dice_history = state.dice_history.clone();
        g.annotated = state.images.iter().map(|s| s.annotations.ids()).collect();
        g.model = Some(Arc::new(state.model.clone()));
    }

    fn run_worker(self: &Arc<Self>) -> Result<(), ServiceError> {
        let dataset = {
            let cached = self.lock().dataset.clone();
            match cached {
                Some(d) => d,
                None => {
                    let d = Arc::new(self.config.load_dataset()?);
                    self.lock().dataset = Some(d.clone());
                    d
                }
            }
        };
        let state_dir = self.dir.join(STATE_DIR);
        let spl = self.config.spl.clone();
        let mut run = if state_dir.join("state.json").exists() {
            SplRun::resume(&dataset, spl, self.config.seed, TrainState::load(&state_dir)?)?
        } else {
            SplRun::new(&dataset, spl, self.config.seed)?
        };
        self.publish(&mut self.lock(), run.state());
        let mut annotator = InteractiveAnnotator { session: self.clone() };
        loop {
            {
                let mut g = self.lock();
                if g.suspend {
                    g.suspend = false;
                    self.set_phase(&mut g, Phase::Suspended);
                    return Ok(());
                }
            }
            let outcome = match run.step(&mut annotator) {
                Ok(o) => o,
                Err(SplError::Annotator(AnnotatorError::Aborted(_))) => {
                    let mut g = self.lock();
                    g.suspend = false;
                    g.pending = None;
                    self.set_phase(&mut g, Phase::Suspended);
                    return Ok(());
                }
                Err(e) => return Err(e.into()),
            };
            run.state().save(&state_dir)?;
            let mut g = self.lock();
            self.publish(&mut g, run.state());
            log::info!("session {}: iteration {} done", self.id, run.state().iteration);
            if outcome == StepOutcome::Finished {
                let report = run.report();
                std::fs::write(self.dir.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
                g.report = Some(report);
                self.set_phase(&mut g, Phase::Converged);
                return Ok(());
            }
        }
    }

    /// Starts the worker unless one is already running.
    pub fn start(self: &Arc<Self>) {
        {
            let mut g = self.lock();
            if g.worker_running || matches!(g.phase, Phase::Converged) {
                return;
            }
            g.worker_running = true;
            g.suspend = false;
            g.error = None;
            self.set_phase(&mut g, Phase::Training);
        }
        let session = self.clone();
        std::thread::spawn(move || {
            let result = session.run_worker();
            let mut g = session.lock();
            g.worker_running = false;
            if let Err(e) = result {
                log::error!("session {}: {e}", session.id);
                g.error = Some(e.to_string());
                g.pending = None;
                session.set_phase(&mut g, Phase::Failed);
            }
        });
    }

    /// Blocks until the phase satisfies `done` or `timeout` passes.
    pub fn wait_for(&self, timeout: std::time::Duration, done: impl Fn(&Shared) -> bool) -> Phase {
        let g = self.lock();
        let (g, _) = self
            .wake
            .wait_timeout_while(g, timeout, |s| !done(s))
            .unwrap_or_else(|e| e.into_inner());
        g.phase
    }
}

/// Annotator whose answers arrive through [`Session::submit`].
pub struct InteractiveAnnotator {
    session: Arc<Session>,
}

impl Annotator for InteractiveAnnotator {
    fn annotate(
        &mut self,
        batches: &[QueryBatch],
        contexts: &[QueryContext<'_>],
    ) -> Result<Vec<AnnotationSet>, AnnotatorError> {
        let s = &self.session;
        let mut g = s.lock();
        if g.suspend {
            return Err(AnnotatorError::Aborted("suspend requested".into()));
        }
        g.pending = Some(Pending {
            iteration: batches.first().map_or(0, |b| b.iteration),
            batches: batches.to_vec(),
            answers: vec![None; batches.len()],
            predictions: batches.iter().map(|b| contexts[b.image_id].prediction.clone()).collect(),
        });
        s.set_phase(&mut g, Phase::AwaitingAnnotations);
        loop {
            if g.suspend {
                g.pending = None;
                return Err(AnnotatorError::Aborted("suspend requested".into()));
            }
            if g.pending.as_ref().is_some_and(|p| p.remaining() == 0) {
                let p = g.pending.take().expect("checked");
                s.persist(&g);
                return Ok(p.answers.into_iter().map(|a| a.expect("all answered")).collect());
            }
            g = s.wake.wait(g).unwrap_or_else(|e| e.into_inner());
        }
    }
}

/// All sessions under one data directory.
pub struct SessionManager {
    root: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
}

impl SessionManager {
    /// Loads persisted sessions and restarts those that were training or
    /// awaiting annotations when the process stopped.
    pub fn open(root: impl Into<PathBuf>) -> Result<Arc<Self>, ServiceError> {
        let root = root.into();
        let dir = root.join("sessions");
        std::fs::create_dir_all(&dir)?;
        let mut sessions = BTreeMap::new();
        let mut entries: Vec<_> = std::fs::read_dir(&dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            let Ok(bytes) = std::fs::read(path.join("session.json")) else {
                continue;
            };
            let file: SessionFile = match serde_json::from_slice(&bytes) {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            let session = Arc::new(Session::new(file.id.clone(), file.config, path.clone(), file.phase, file.error));
            if file.phase == Phase::Converged {
                if let Ok(r) = std::fs::read(path.join(REPORT_FILE)) {
                    session.lock().report = serde_json::from_slice(&r).ok();
                }
            }
            sessions.insert(file.id, session);
        }
        let manager = Arc::new(Self {
            root,
            sessions: RwLock::new(sessions),
        });
        for s in manager.sessions.read().expect("not poisoned").values() {
            let phase = s.lock().phase;
            if matches!(phase, Phase::Training | Phase::AwaitingAnnotations) {
                log::info!("restarting session {}", s.id);
                s.start();
            }
        }
        Ok(manager)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("not poisoned").get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().expect("not poisoned").keys().cloned().collect()
    }

    /// Persists a new session and starts its worker.
    pub fn create(&self, config: RunConfig) -> Result<Arc<Session>, ServiceError> {
        let id = loop {
            let candidate = format!("{:016x}", rand::random::<u64>());
            if !self.root.join("sessions").join(&candidate).exists() {
                break candidate;
            }
        };
        let dir = self.root.join("sessions").join(&id);
        std::fs::create_dir_all(&dir)?;
        let session = Arc::new(Session::new(id.clone(), config, dir, Phase::Training, None));
        session.persist(&session.lock());
        self.sessions.write().expect("not poisoned").insert(id, session.clone());
        session.start();
        Ok(session)
    }
}
