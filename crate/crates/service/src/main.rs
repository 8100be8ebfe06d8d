use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use arspl_core::dataset::{default_split, load_manifest_dataset, synthetic_dataset, write_dataset};
use arspl_core::layersep::{pseudo_label, PseudoLabelConfig};
use arspl_core::metrics::evaluate_mask;
use arspl_core::par;
use arspl_core::pgm::{save_label_pgm, save_pgm};
use arspl_core::spl::{Mode, SplConfig};
use arspl_service::config::{oracle_for, run_to_dir, Preset, RunConfig, REPORT_FILE};
use arspl_service::session::{Phase, SessionManager};
use arspl_service::{api, ServiceError};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "arspl", version, about = "Weakly supervised vessel segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnnotatorKind {
    Oracle,
    Interactive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic angiogram dataset with ground truth.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Frame size as WIDTHxHEIGHT.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        /// Train, validation and test counts; defaults to a 4:1:2 split.
        #[arg(long, value_parser = parse_split)]
        split: Option<[usize; 3]>,
    },
    /// Write vesselness maps and pseudo labels for the training images.
    Pseudolabel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        xi_scale: f64,
        #[arg(long, default_value_t = 20)]
        disk: usize,
    },
    /// Train a segmentation model and write a run report.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "arspl", value_parser = |s: &str| s.parse::<Mode>())]
        mode: Mode,
        #[arg(long, value_enum, default_value = "oracle")]
        annotator: AnnotatorKind,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk", value_parser = |s: &str| s.parse::<Preset>())]
        preset: Preset,
        /// JSON loop settings replacing the preset's (the mode flag still applies).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Port for the interactive annotator's session service.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Serve the session API over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.parse().map_err(|e| format!("width: {e}"))?;
    let h: usize = h.parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn parse_split(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|_| "expected three counts: train,val,test".to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), ServiceError> {
    match command {
        Command::Synth {
            seed,
            out,
            count,
            size,
            split,
        } => {
            let split = split.unwrap_or_else(|| default_split(count));
            if split.iter().sum::<usize>() != count {
                return Err(ServiceError::Invalid(format!("split {split:?} does not sum to {count}")));
            }
            let raw = synthetic_dataset(seed, split, size.0, size.1)?;
            let manifest = write_dataset(&raw, &out)?;
            println!("{}", manifest.display());
        }
        Command::Pseudolabel {
            manifest,
            out,
            xi_scale,
            disk,
        } => {
            let raw = load_manifest_dataset(&manifest)?;
            let cfg = PseudoLabelConfig {
                xi_scale,
                disk_diameter: disk,
                ..PseudoLabelConfig::default()
            };
            std::fs::create_dir_all(&out)?;
            let results = par::try_map(&raw.train, |s| pseudo_label(&s.sequence, &cfg))
                .map_err(|e| ServiceError::Invalid(e.to_string()))?;
            for (s, pl) in raw.train.iter().zip(&results) {
                save_pgm(&pl.vesselness.to_image(), out.join(format!("{}_vesselness.pgm", s.name)))
                    .map_err(|e| ServiceError::Invalid(e.to_string()))?;
                save_label_pgm(&pl.labels, out.join(format!("{}_pseudo.pgm", s.name)))
                    .map_err(|e| ServiceError::Invalid(e.to_string()))?;
                let dice = s
                    .truth
                    .as_ref()
                    .and_then(|t| evaluate_mask(&pl.labels, t).ok())
                    .map_or_else(|| "-".to_string(), |m| format!("{:.4}", m.dice));
                println!(
                    "{}\trpca_iterations={}\tconverged={}\tdice={dice}",
                    s.name, pl.rpca_iterations, pl.rpca_converged
                );
            }
        }
        Command::Train {
            manifest,
            mode,
            annotator,
            seed,
            out,
            preset,
            config,
            port,
        } => {
            let mut cfg = RunConfig::from_preset(std::path::absolute(&manifest)?, seed, mode, preset);
            if let Some(path) = config {
                let spl: SplConfig = serde_json::from_slice(&std::fs::read(path)?)?;
                cfg.spl = SplConfig { mode, ..spl };
            }
            let report = match annotator {
                AnnotatorKind::Oracle => {
                    let dataset = cfg.load_dataset()?;
                    run_to_dir(&cfg, &dataset, &mut oracle_for(&dataset), &out)?
                }
                AnnotatorKind::Interactive => train_interactive(cfg, &out, port)?,
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { port, data } => {
            let manager = SessionManager::open(data)?;
            serve_blocking(manager, port, |_| std::future::pending::<()>())?;
        }
    }
    Ok(())
}

fn serve_blocking<F: std::future::Future<Output = ()> + Send + 'static>(
    manager: Arc<SessionManager>,
    port: u16,
    until: impl FnOnce(Arc<SessionManager>) -> F,
) -> Result<(), ServiceError> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        let stop = until(manager.clone());
        tokio::select! {
            r = api::serve(listener, manager) => r,
            _ = stop => Ok(()),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })?;
    Ok(())
}

/// Hosts one session on `port` and blocks until it converges or fails. A
/// suspended session keeps the server up so it can be resumed.
fn train_interactive(cfg: RunConfig, out: &std::path::Path, port: u16) -> Result<arspl_core::spl::RunReport, ServiceError> {
    let manager = SessionManager::open(out)?;
    let session = manager.create(cfg)?;
    println!("session {} at http://localhost:{port}/sessions/{}", session.id, session.id);
    let watched = session.clone();
    serve_blocking(manager, port, move |_| async move {
        let _ = tokio::task::spawn_blocking(move || loop {
            let done = |p: Phase| matches!(p, Phase::Converged | Phase::Failed);
            if done(watched.wait_for(Duration::from_secs(3600), |s| done(s.phase))) {
                break;
            }
        })
        .await;
    })?;
    let g = session.lock();
    match (&g.report, g.phase) {
        (Some(r), Phase::Converged) => {
            std::fs::write(out.join(REPORT_FILE), serde_json::to_vec_pretty(r)?)?;
            Ok(r.clone())
        }
        (_, phase) => Err(ServiceError::Invalid(format!(
            "session {} ended {phase:?}{}",
            session.id,
            g.error.as_deref().map(|e| format!(": {e}")).unwrap_or_default()
        ))),
    }
}
