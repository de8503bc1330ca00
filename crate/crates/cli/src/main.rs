//! `darter`: synthetic data generation, training, tracking, evaluation and
//! benchmarking for the gated dual-template tracker.
//!
//! Failures print a single `error[<class>]: <message>` line on stderr and exit
//! with a class-specific status (see [`exit_code`]). Set `DARTER_LOG` to
//! `error`, `warn`, `info` or `debug` to control log output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use darter_core::config::RunConfig;
use darter_core::eval::{parse_sweep, Ablation};
use darter_core::{pipeline, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "darter", version, about = "Gated dual-template single-stream tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run configuration; omitted sections and keys use defaults, unknown keys are errors.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; overrides the file's `seed` and derives every sub-seed.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), self.seed)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic low-light dataset.
    GenData {
        /// Output dataset directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write a checkpoint, `<CKPT>.best` and `<CKPT>.loss.csv`.
    Train {
        /// Dataset directory produced by gen-data (or any directory of annotated sequences).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint path to write.
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Track one sequence and write one `x,y,w,h` line per frame.
    Track {
        /// Checkpoint to load.
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Sequence directory (frames plus groundtruth.txt; only the first box is used).
        #[arg(long, value_name = "DIR")]
        seq: PathBuf,
        /// Result file to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Optional per-layer activation trace (`frame,layer,p,executed` lines).
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        /// Optional directory for per-frame overlay PNGs.
        #[arg(long, value_name = "DIR")]
        overlay: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score `<RESULTS>/<sequence>.txt` files against a dataset.
    Eval {
        /// Directory of result files named after the sequences.
        #[arg(long, value_name = "DIR")]
        results: PathBuf,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Report JSON to write.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        /// Optional directory for success / precision curve CSVs.
        #[arg(long, value_name = "DIR")]
        curves: Option<PathBuf>,
    },
    /// Track a dataset under a beta sweep and module ablations.
    Bench {
        /// Checkpoint to load.
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Activation thresholds as START:STOP:STEP (inclusive), one report per value.
        #[arg(long, value_name = "A:B:STEP")]
        beta_sweep: Option<String>,
        /// Comma-separated modules to ablate (dfb, dfa); adds the full model and every combination.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        ablations: Vec<String>,
        /// Report JSON to write.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Process exit status for an error class.
fn exit_code(e: &Error) -> u8 {
    match e.class() {
        "missing-file" => 3,
        "bad-config" => 4,
        "checkpoint-mismatch" => 5,
        "parse" | "json" | "image" | "invalid-box" | "shape" | "sequence-too-short" => 6,
        "non-finite" => 7,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, cfg } => {
            let cfg = cfg.resolve()?;
            let m = pipeline::gen_data(&out, &cfg)?;
            log::info!("wrote {} sequences to {}", m.sequences.len(), out.display());
            println!("{}", out.join(darter_core::data::MANIFEST).display());
        }
        Command::Train { data, out, cfg } => {
            let cfg = cfg.resolve()?;
            let r = pipeline::train(&cfg, &data, &out)?;
            log::info!("trained {} steps, best epoch {}", r.steps, r.best_epoch + 1);
            println!("{}", out.display());
        }
        Command::Track { ckpt, seq, out, trace, overlay, cfg } => {
            let cfg = cfg.resolve()?;
            let run = pipeline::track(&ckpt, &seq, &cfg.tracker, &out, trace.as_deref(), overlay.as_deref())?;
            log::info!("{} frames, {:.1} fps, {:.2} layers/frame", run.boxes.len(), run.fps(), run.mean_layers());
            println!("{}", out.display());
        }
        Command::Eval { results, data, report, curves } => {
            let r = pipeline::eval(&results, &data, &report, curves.as_deref())?;
            print_overall(&report, &r.overall)?;
        }
        Command::Bench { ckpt, data, beta_sweep, ablations, report, cfg } => {
            let cfg = cfg.resolve()?;
            let betas = match &beta_sweep {
                Some(s) => parse_sweep(s)?,
                None => Vec::new(),
            };
            let ablations = ablations.iter().map(|a| a.parse::<Ablation>()).collect::<Result<Vec<_>>>()?;
            if betas.is_empty() && ablations.is_empty() {
                return Err(Error::Config("bench needs --beta-sweep and/or --ablations".into()));
            }
            let reports = pipeline::bench(&ckpt, &data, &betas, &ablations, &cfg.tracker, &report)?;
            for r in &reports {
                let label = r.config["setting"]["label"].as_str().unwrap_or("?");
                let o = &r.overall;
                log::info!(
                    "{label}: P {:.2} P_norm {:.2} AUC {:.2} layers {:.2} fps {:.1}",
                    o.precision,
                    o.norm_precision,
                    o.auc,
                    o.mean_layers.unwrap_or(f64::NAN),
                    o.fps.unwrap_or(f64::NAN)
                );
            }
            println!("{}", report.display());
        }
    }
    Ok(())
}

fn print_overall(report: &Path, o: &darter_core::eval::OverallMetrics) -> Result<()> {
    let line = serde_json::to_string(o).map_err(|e| Error::Json { path: report.to_path_buf(), msg: e.to_string() })?;
    println!("{line}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DARTER_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}
