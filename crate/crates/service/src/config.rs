//! Run configuration shared by the CLI and the session service.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use arspl_core::dataset::{load_manifest_dataset, Dataset, PrepareConfig};
use arspl_core::spl::{Mode, RunReport, SplConfig, SplRun, StepOutcome, TrainState};
use arspl_core::suggest::{Annotator, OracleAnnotator};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Everything that determines a run: two runs with equal configs and equal
/// annotations produce bit-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub seed: u64,
    pub spl: SplConfig,
    pub prepare: PrepareConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small images on a CPU.
    #[default]
    Desk,
    /// Full-size defaults: 8 queries per image, 5000 steps per round.
    Full,
}

impl Preset {
    pub fn spl(self, mode: Mode) -> SplConfig {
        match self {
            Preset::Desk => SplConfig::desk(mode),
            Preset::Full => SplConfig {
                mode,
                ..SplConfig::default()
            },
        }
    }

    pub fn prepare(self) -> PrepareConfig {
        match self {
            Preset::Desk => PrepareConfig::desk(),
            Preset::Full => PrepareConfig::default(),
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(format!("unknown preset {s:?}; expected desk or full")),
        }
    }
}

impl RunConfig {
    pub fn from_preset(manifest: PathBuf, seed: u64, mode: Mode, preset: Preset) -> Self {
        Self {
            manifest,
            seed,
            spl: preset.spl(mode),
            prepare: preset.prepare(),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset, ServiceError> {
        let raw = load_manifest_dataset(&self.manifest)?;
        Ok(Dataset::prepare(&raw, &self.prepare)?)
    }
}

pub fn oracle_for(dataset: &Dataset) -> OracleAnnotator {
    OracleAnnotator::new(dataset.train.iter().map(|s| s.truth.clone()).collect())
}

pub const STATE_DIR: &str = "state";
pub const REPORT_FILE: &str = "report.json";

/// Runs to completion, saving the state under `out/state` after every
/// iteration and continuing from it when present. Writes `out/report.json`
/// and `out/model.ckpt`.
pub fn run_to_dir(
    cfg: &RunConfig,
    dataset: &Dataset,
    annotator: &mut dyn Annotator,
    out: &Path,
) -> Result<RunReport, ServiceError> {
    std::fs::create_dir_all(out)?;
    let state_dir = out.join(STATE_DIR);
    let mut run = if state_dir.join("state.json").exists() {
        let state = TrainState::load(&state_dir)?;
        log::info!("resuming after iteration {}", state.iteration);
        SplRun::resume(dataset, cfg.spl.clone(), cfg.seed, state)?
    } else {
        SplRun::new(dataset, cfg.spl.clone(), cfg.seed)?
    };
    while !run.is_finished() {
        let outcome = run.step(annotator)?;
        run.state().save(&state_dir)?;
        if outcome == StepOutcome::Finished {
            break;
        }
    }
    let report = run.report();
    std::fs::write(out.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(
        out.join("model.ckpt"),
        arspl_core::segmodel::encode_checkpoint(&run.state().model),
    )?;
    Ok(report)
}
