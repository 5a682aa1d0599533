//! `r23d`: generate synthetic data, train, evaluate and explain.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 model or shape
//! error. `R23D_THREADS` caps the worker pool.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, ExplainArgs};
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "r23d", version, about = "Part-level 2D-3D human recognition on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset from the `generate` section.
    Gen {
        /// JSON run configuration; every section is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from the `model` and `train` sections.
    Train {
        /// JSON run configuration; every section is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest (`manifest.jsonl`).
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split against a gallery and write metric CSVs.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset manifest; its test split supplies the probes.
        #[arg(long)]
        data: PathBuf,
        /// Directory of gallery `.pcp` clouds (default: the dataset's `clouds/`).
        #[arg(long)]
        gallery: Option<PathBuf>,
        /// Comma-separated thresholds, overriding `eval.thetas`.
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f32>>,
        /// Directory for the CSV outputs.
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration; its `model` section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Explain one image against one cloud; outputs are written beside the image.
    Explain {
        /// Checkpoint to use.
        #[arg(long)]
        ckpt: PathBuf,
        /// Probe image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        /// Gallery cloud (PCP).
        #[arg(long)]
        pcp: PathBuf,
        /// Confidence threshold in [0, 1).
        #[arg(long, default_value_t = r23d::register::DEFAULT_THETA)]
        theta: f32,
        /// Identity of the cloud (default: the number in its file name).
        #[arg(long)]
        identity: Option<u32>,
        /// Gallery directory; when given, the decision is whether the cloud ranks first.
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("R23D_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::input(format!("R23D_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::input(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            println!("{}", commands::gen(&cfg, &out)?.display());
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            println!("{}", commands::train_cmd(&cfg, &data, &out)?.display());
        }
        Command::Eval {
            ckpt,
            data,
            gallery,
            thetas,
            out,
            config,
        } => {
            let cfg = config.as_deref().map(|p| RunConfig::load(Some(p))).transpose()?;
            let s = commands::eval_cmd(EvalArgs {
                ckpt: &ckpt,
                data: &data,
                gallery: gallery.as_deref(),
                thetas,
                out: &out,
                config: cfg.as_ref(),
            })?;
            for f in &s.files {
                println!("{}", f.display());
            }
            log::info!("rank-1 accuracy {:.3}, macro F1 {:.3}", s.accuracy, s.macro_f1);
        }
        Command::Explain {
            ckpt,
            image,
            pcp,
            theta,
            identity,
            gallery,
        } => {
            let o = commands::explain_cmd(ExplainArgs {
                ckpt: &ckpt,
                image: &image,
                pcp: &pcp,
                theta,
                identity,
                gallery: gallery.as_deref(),
            })?;
            println!("{}", o.line);
            log::info!("wrote {}, {}, {}", o.text.display(), o.json.display(), o.overlay.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
