//! The alternating training loop and its persisted state.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::image::LabelGrid;
use crate::metrics::{evaluate_mask, MeanMetrics, MetricReport};
use crate::par;
use crate::rng::{self, tag};
use crate::segmodel::{
    decode_checkpoint, encode_checkpoint, init_model, mcdo_expectation, objective, pixel_losses, predict_binary,
    train_weighted, SegModel, TrainHyper, TrainSample, DEFAULT_DROPOUT, DEFAULT_WIDTHS,
};
use crate::suggest::{check_reply, select_queries, AnnotationStore, Annotator, QueryBatch, QueryContext};
use crate::uncertainty::{eta, fuse_mvu, model_uncertainty, vesselness_uncertainty, EntropyForm};

use super::{
    init_latent_weights, pace_params, spld_assign, update_self_paced_labels, ImageState, LatentWeights, SplError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Arspl,
    Noar,
    Nospl,
    Ns,
    Fs,
    Pl,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Arspl, Mode::Noar, Mode::Nospl, Mode::Ns, Mode::Fs, Mode::Pl];

    pub fn display_name(self) -> &'static str {
        match self {
            Mode::Arspl => "AR-SPL",
            Mode::Noar => "AR-SPL-NoAR",
            Mode::Nospl => "AR-SPL-NoSPL",
            Mode::Ns => "Baseline-NS",
            Mode::Fs => "Baseline-FS",
            Mode::Pl => "Baseline-PL",
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Mode::Arspl => "arspl",
            Mode::Noar => "noar",
            Mode::Nospl => "nospl",
            Mode::Ns => "ns",
            Mode::Fs => "fs",
            Mode::Pl => "pl",
        }
    }

    fn iterative(self) -> bool {
        matches!(self, Mode::Arspl | Mode::Noar | Mode::Nospl)
    }

    fn queries(self) -> bool {
        matches!(self, Mode::Arspl | Mode::Nospl)
    }

    fn self_paced(self) -> bool {
        matches!(self, Mode::Arspl | Mode::Noar)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.cli_name() == s || m.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode {s:?}; expected one of arspl, noar, nospl, ns, fs, pl"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplConfig {
    pub mode: Mode,
    pub tau0: f64,
    pub gamma0: f64,
    pub mu: f64,
    /// Weight of annotated pixels.
    pub omega: f64,
    /// Decay rate of the vesselness/model uncertainty trade-off.
    pub theta: f64,
    pub stop_dice_increment: f64,
    pub max_alt_iters: u32,
    /// Superpixels queried per training image per iteration.
    pub n_b: usize,
    pub mcdo_passes: u32,
    pub entropy: EntropyForm,
    pub dropout_rate: f64,
    pub widths: [usize; 3],
    /// Optimiser settings for each alternating iteration after the first.
    pub hyper: TrainHyper,
    /// Optimiser settings of the first iteration, which starts from random
    /// weights. `None` uses `hyper`.
    pub warm_start: Option<TrainHyper>,
    /// Steps of the single training run of the NS and FS baselines.
    pub baseline_steps: usize,
}

impl Default for SplConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Arspl,
            tau0: 0.75,
            gamma0: 0.20,
            mu: 0.01,
            omega: 5.0,
            theta: 0.4,
            stop_dice_increment: 0.0005,
            max_alt_iters: 20,
            n_b: 8,
            mcdo_passes: 20,
            entropy: EntropyForm::Single,
            dropout_rate: DEFAULT_DROPOUT,
            widths: DEFAULT_WIDTHS,
            hyper: TrainHyper::default(),
            warm_start: None,
            baseline_steps: 5000,
        }
    }
}

impl SplConfig {
    /// Settings for 64×64 synthetic runs on a CPU: a long warm start, then
    /// short fine-tuning rounds at a lower rate.
    pub fn desk(mode: Mode) -> SplConfig {
        SplConfig {
            mode,
            n_b: 3,
            hyper: TrainHyper {
                lr0: 0.03,
                batch: 4,
                max_steps: 300,
                ..TrainHyper::default()
            },
            warm_start: Some(TrainHyper {
                lr0: 0.1,
                batch: 4,
                max_steps: 1000,
                ..TrainHyper::default()
            }),
            baseline_steps: 1000,
            ..SplConfig::default()
        }
    }

    pub fn with_mode(&self, mode: Mode) -> SplConfig {
        SplConfig { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SplError> {
        let bad = |m: &str| Err(SplError::InvalidConfig(m.to_string()));
        if !(self.tau0 > 0.0 && self.gamma0 > 0.0) {
            return bad("tau0 and gamma0 must be positive");
        }
        if !(self.mu > 0.0) {
            return bad("mu must be positive");
        }
        if !(self.omega > 1.0 && self.omega.is_finite()) {
            return bad("omega must exceed 1");
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("theta must lie in (0, 1]");
        }
        if !(self.stop_dice_increment > 0.0) {
            return bad("stop_dice_increment must be positive");
        }
        if self.max_alt_iters == 0 {
            return bad("max_alt_iters must be at least 1");
        }
        if self.mcdo_passes == 0 {
            return bad("mcdo_passes must be at least 1");
        }
        self.hyper.validate()?;
        if let Some(h) = &self.warm_start {
            h.validate()?;
        }
        Ok(())
    }

    fn hyper_for(&self, k: u32) -> TrainHyper {
        match self.mode {
            Mode::Ns | Mode::Fs => TrainHyper {
                max_steps: self.baseline_steps,
                ..self.warm_start.clone().unwrap_or_else(|| self.hyper.clone())
            },
            _ if k == 1 => self.warm_start.clone().unwrap_or_else(|| self.hyper.clone()),
            _ => self.hyper.clone(),
        }
    }
}

/// Everything that changes across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u32,
    pub images: Vec<ImageState>,
    pub model: SegModel,
    pub dice_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub finished: bool,
    /// True when the run stopped on the validation increment rule rather
    /// than the iteration cap.
    pub stopped_by_rule: bool,
}

const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    iteration: u32,
    images: Vec<ImageState>,
    dice_history: Vec<f64>,
    grad_norm_history: Vec<f64>,
    finished: bool,
    stopped_by_rule: bool,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

impl TrainState {
    /// Writes `state.json` and `model.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SplError> {
        std::fs::create_dir_all(dir)?;
        let file = StateFile {
            version: STATE_VERSION,
            iteration: self.iteration,
            images: self.images.clone(),
            dice_history: self.dice_history.clone(),
            grad_norm_history: self.grad_norm_history.clone(),
            finished: self.finished,
            stopped_by_rule: self.stopped_by_rule,
        };
        write_atomic(&dir.join("model.ckpt"), &encode_checkpoint(&self.model))?;
        let json = serde_json::to_vec(&file).map_err(|e| SplError::State(e.to_string()))?;
        write_atomic(&dir.join("state.json"), &json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TrainState, SplError> {
        let bytes = std::fs::read(dir.join("state.json"))?;
        let file: StateFile = serde_json::from_slice(&bytes).map_err(|e| SplError::State(e.to_string()))?;
        if file.version != STATE_VERSION {
            return Err(SplError::State(format!("unsupported state version {}", file.version)));
        }
        let model = decode_checkpoint(&std::fs::read(dir.join("model.ckpt"))?)?;
        Ok(TrainState {
            iteration: file.iteration,
            images: file.images,
            model,
            dice_history: file.dice_history,
            grad_norm_history: file.grad_norm_history,
            finished: file.finished,
            stopped_by_rule: file.stopped_by_rule,
        })
    }

    pub fn annotated_superpixels(&self) -> usize {
        self.images.iter().map(|s| s.annotations.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub mean: MeanMetrics,
    pub per_image: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub iterations: u32,
    pub dice_history: Vec<f64>,
    pub annotated_superpixels: usize,
    /// Annotated pixels over all training pixels.
    pub annotated_pixel_fraction: f64,
    pub test_metrics: TestMetrics,
    pub grad_norm_history: Vec<f64>,
    pub stopped_by_rule: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Finished,
}

/// One alternating-minimisation run. [`step`](SplRun::step) performs a
/// whole iteration and commits it atomically, so the state seen between
/// steps is always an iteration boundary that can be saved and resumed.
pub struct SplRun<'a> {
    dataset: &'a Dataset,
    cfg: SplConfig,
    seed: u64,
    state: TrainState,
}

fn mean_dice(model: &SegModel, samples: &[Sample]) -> f64 {
    let dice = par::map(samples, |s| {
        let truth = s.truth.as_ref().expect("checked at construction");
        evaluate_mask(&predict_binary(model, &s.image), truth)
            .expect("same dimensions")
            .dice
    });
    dice.iter().sum::<f64>() / dice.len().max(1) as f64
}

impl<'a> SplRun<'a> {
    pub fn new(dataset: &'a Dataset, cfg: SplConfig, seed: u64) -> Result<Self, SplError> {
        Self::check(dataset, &cfg)?;
        let model = init_model(seed, cfg.dropout_rate, cfg.widths)?;
        let images = dataset
            .train
            .iter()
            .map(|s| {
                let n = s.image.len();
                let (labels, v) = match cfg.mode {
                    Mode::Fs => (s.truth.clone().expect("checked"), vec![1.0; n]),
                    Mode::Ns | Mode::Nospl | Mode::Pl => (s.pseudo.clone(), vec![1.0; n]),
                    Mode::Arspl | Mode::Noar => (s.pseudo.clone(), init_latent_weights(&s.vesselness).v),
                };
                ImageState {
                    labels,
                    weights: LatentWeights {
                        v,
                        annotated: vec![false; n],
                    },
                    annotations: AnnotationStore::default(),
                }
            })
            .collect();
        Ok(Self {
            dataset,
            cfg,
            seed,
            state: TrainState {
                iteration: 0,
                images,
                model,
                dice_history: Vec::new(),
                grad_norm_history: Vec::new(),
                finished: false,
                stopped_by_rule: false,
            },
        })
    }

    /// Continues from a saved iteration boundary.
    pub fn resume(dataset: &'a Dataset, cfg: SplConfig, seed: u64, state: TrainState) -> Result<Self, SplError> {
        Self::check(dataset, &cfg)?;
        if state.images.len() != dataset.train.len() {
            return Err(SplError::State(format!(
                "state has {} training images, dataset has {}",
                state.images.len(),
                dataset.train.len()
            )));
        }
        for (st, s) in state.images.iter().zip(&dataset.train) {
            if st.labels.dims() != s.image.dims() || st.weights.len() != s.image.len() {
                return Err(SplError::State(format!("state does not match image {}", s.name)));
            }
        }
        Ok(Self {
            dataset,
            cfg,
            seed,
            state,
        })
    }

    fn check(dataset: &Dataset, cfg: &SplConfig) -> Result<(), SplError> {
        cfg.validate()?;
        if dataset.train.is_empty() {
            return Err(SplError::Dataset("no training images".into()));
        }
        if cfg.mode != Mode::Pl {
            if dataset.val.is_empty() {
                return Err(SplError::Dataset("validation split is empty".into()));
            }
            if let Some(s) = dataset.val.iter().find(|s| s.truth.is_none()) {
                return Err(SplError::Dataset(format!("validation image {} has no ground truth", s.name)));
            }
        }
        if cfg.mode == Mode::Fs {
            if let Some(s) = dataset.train.iter().find(|s| s.truth.is_none()) {
                return Err(SplError::Dataset(format!("training image {} has no ground truth", s.name)));
            }
        }
        Ok(())
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &SplConfig {
        &self.cfg
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    fn samples<'s>(&'s self, st: &'s TrainState) -> Vec<TrainSample<'s>> {
        self.dataset
            .train
            .iter()
            .zip(&st.images)
            .map(|(s, im)| TrainSample {
                image: &s.image,
                labels: &im.labels,
                weights: &im.weights.v,
            })
            .collect()
    }

    /// Runs the next iteration. On error the state is left at the previous
    /// boundary.
    pub fn step(&mut self, annotator: &mut dyn Annotator) -> Result<StepOutcome, SplError> {
        if self.state.finished {
            return Ok(StepOutcome::Finished);
        }
        let cfg = &self.cfg;
        let k = self.state.iteration + 1;
        let mut next = self.state.clone();
        next.iteration = k;

        if cfg.mode == Mode::Pl {
            next.finished = true;
            self.state = next;
            return Ok(StepOutcome::Finished);
        }

        // (1) Fit the model to the current labels and weights.
        let hyper = cfg.hyper_for(k);
        let model = {
            let samples = self.samples(&next);
            let model = train_weighted(&next.model, &samples, &hyper)?.model;
            let g = objective(&model, &samples, hyper.lambda)?.gradient.norm();
            next.grad_norm_history.push(g);
            model
        };
        log::info!("{} iteration {k}: trained {} steps", cfg.mode, hyper.max_steps);

        if cfg.mode.iterative() {
            let train = &self.dataset.train;
            // (2) Re-label from the model; annotations take precedence.
            if cfg.mode.self_paced() {
                let labels = par::map_range(train.len(), |i| {
                    update_self_paced_labels(&model, &train[i].image, &next.images[i].annotations, &train[i].partition)
                });
                for (st, y) in next.images.iter_mut().zip(labels) {
                    st.labels = y;
                }
            }

            // (3) Query the most uncertain superpixels and refine.
            if cfg.mode.queries() && cfg.n_b > 0 {
                let batches = self.select(&model, &next, k);
                let pending: Vec<QueryBatch> = batches.into_iter().filter(|b| !b.is_empty()).collect();
                if !pending.is_empty() {
                    let contexts: Vec<QueryContext<'_>> = train
                        .iter()
                        .zip(&next.images)
                        .map(|(s, st)| QueryContext {
                            image: &s.image,
                            partition: &s.partition,
                            prediction: &st.labels,
                        })
                        .collect();
                    let sets = annotator.annotate(&pending, &contexts)?;
                    check_reply(&pending, &sets)?;
                    for set in &sets {
                        let i = set.image_id;
                        next.images[i].apply_refinement(set, &train[i].partition, cfg.omega)?;
                    }
                }
            }

            // (4) Re-weight pixels.
            if cfg.mode.self_paced() {
                let pace = pace_params(k, cfg.tau0, cfg.gamma0, cfg.mu);
                let weights = par::map_range(train.len(), |i| {
                    let losses = pixel_losses(&model, &train[i].image, &next.images[i].labels);
                    spld_assign(&losses, pace)
                });
                for (st, v) in next.images.iter_mut().zip(weights) {
                    st.weights.v = v.into_iter().map(f64::from).collect();
                    st.restore_annotated_weights(cfg.omega);
                }
            } else {
                for st in &mut next.images {
                    for (v, &a) in st.weights.v.iter_mut().zip(&st.weights.annotated) {
                        *v = if a { cfg.omega } else { 0.0 };
                    }
                }
            }
        }

        // (5) Validate and decide whether to stop.
        let dice = mean_dice(&model, &self.dataset.val);
        log::info!("{} iteration {k}: validation dice {dice:.4}", cfg.mode);
        let prev = next.dice_history.last().copied();
        next.dice_history.push(dice);
        next.model = model;
        if !cfg.mode.iterative() {
            next.finished = true;
        } else if prev.is_some_and(|p| dice - p < cfg.stop_dice_increment) {
            next.finished = true;
            next.stopped_by_rule = true;
        } else if k >= cfg.max_alt_iters {
            next.finished = true;
        }
        self.state = next;
        Ok(if self.state.finished {
            StepOutcome::Finished
        } else {
            StepOutcome::Continue
        })
    }

    fn select(&self, model: &SegModel, st: &TrainState, k: u32) -> Vec<QueryBatch> {
        let cfg = &self.cfg;
        let e = eta(k, cfg.theta);
        let train = &self.dataset.train;
        par::map_range(train.len(), |i| {
            let s = &train[i];
            let pass_seed = rng::derive_key(self.seed, &[tag::MCDO, u64::from(k), i as u64]);
            let m = model_uncertainty(&mcdo_expectation(model, &s.image, cfg.mcdo_passes, pass_seed), cfg.entropy);
            let g = vesselness_uncertainty(&s.vesselness);
            let u = fuse_mvu(&m, &g, e, &s.partition).expect("maps share the partition's dimensions");
            select_queries(i, k, &u, &st.images[i].annotations.ids(), cfg.n_b)
        })
    }

    /// Report for the current state; test metrics use the current model
    /// (pseudo labels for the PL baseline).
    pub fn report(&self) -> RunReport {
        let st = &self.state;
        let test: Vec<&Sample> = self.dataset.test.iter().filter(|s| s.truth.is_some()).collect();
        let per_image = par::map(&test, |s| {
            let pred: LabelGrid = if self.cfg.mode == Mode::Pl {
                s.pseudo.clone()
            } else {
                predict_binary(&st.model, &s.image)
            };
            evaluate_mask(&pred, s.truth.as_ref().expect("filtered")).expect("same dimensions")
        });
        let annotated_pixels: usize = self
            .dataset
            .train
            .iter()
            .zip(&st.images)
            .map(|(s, im)| im.annotations.ids().iter().map(|&q| s.partition.size(q as usize)).sum::<usize>())
            .sum();
        RunReport {
            mode: self.cfg.mode.display_name().to_string(),
            iterations: st.iteration,
            dice_history: st.dice_history.clone(),
            annotated_superpixels: st.annotated_superpixels(),
            annotated_pixel_fraction: annotated_pixels as f64 / self.dataset.train_pixels() as f64,
            test_metrics: TestMetrics {
                mean: MeanMetrics::from_reports(&per_image),
                per_image,
            },
            grad_norm_history: st.grad_norm_history.clone(),
            stopped_by_rule: st.stopped_by_rule,
        }
    }

    pub fn into_parts(self) -> (SegModel, RunReport, TrainState) {
        let report = self.report();
        (self.state.model.clone(), report, self.state)
    }
}

/// Runs to completion with `annotator` answering every query.
pub fn arspl_run(
    dataset: &Dataset,
    cfg: SplConfig,
    annotator: &mut dyn Annotator,
    seed: u64,
) -> Result<(SegModel, RunReport), SplError> {
    let mut run = SplRun::new(dataset, cfg, seed)?;
    while run.step(annotator)? == StepOutcome::Continue {}
    let (model, report, _) = run.into_parts();
    Ok((model, report))
}
