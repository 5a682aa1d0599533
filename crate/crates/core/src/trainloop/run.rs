use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{sample_members, PreparedBatch, TrainingSet};
use super::step::{train_step, StepLosses};
use super::{TrainConfig, TrainError};
use crate::netarch::{ModelConfig, ModelParams};
use crate::numcore::{AdamConfig, OptimizerState};

pub const LOG_HEADER: &str = "step,total,contrastive,detector,temperature";
pub const FINAL_CHECKPOINT: &str = "final.r23d";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Stream for batch sampling, separate from parameter initialization.
const BATCH_STREAM: u64 = 0x6261_7463_6865_7321;

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    /// `None` for skipped steps.
    pub history: Vec<Option<StepLosses>>,
    pub skipped: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.r23d")
}

/// Trains on the manifest's train split, writing checkpoints and a CSV log
/// into `out_dir`.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, manifest: &Path, out_dir: &Path) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    model.validate()?;
    let set = TrainingSet::load(manifest, model)?;
    train_on(&set, model, cfg, out_dir)
}

/// Training over an already loaded set.
pub fn train_on(set: &TrainingSet, model: &ModelConfig, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut params = ModelParams::init(model, cfg.seed)?;
    let mut opt = OptimizerState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);

    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;

    let mut history = Vec::with_capacity(cfg.steps);
    let mut skipped = 0;
    for step in 1..=cfg.steps {
        let members = sample_members(set, cfg, &mut rng)?;
        let outcome = match PreparedBatch::assemble(set, &members, cfg.n_cap, cfg.cross_pairs, &mut rng) {
            Ok(batch) => Some(train_step(&batch, &mut params, &mut opt, cfg.lambda_det)?),
            Err(TrainError::EmptyBatch { pixel_rows, vertex_rows }) => {
                log::warn!("step {step}: skipped, empty feature side ({pixel_rows} pixel rows, {vertex_rows} vertex rows)");
                skipped += 1;
                None
            }
            Err(e) => return Err(e),
        };
        match &outcome {
            Some(l) => writeln!(
                log,
                "{step},{},{},{},{}",
                l.total, l.contrastive, l.detector, l.temperature
            ),
            None => writeln!(log, "{step},NaN,NaN,NaN,{}", params.temperature()),
        }
        .map_err(io_err(&log_path))?;
        if let Some(l) = &outcome {
            if step == 1 || step % 25 == 0 {
                log::info!(
                    "step {step}/{}: total {:.4} contrastive {:.4} detector {:.4} tau {:.3}",
                    cfg.steps,
                    l.total,
                    l.contrastive,
                    l.detector,
                    l.temperature
                );
            }
        }
        history.push(outcome);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            params.save(&out_dir.join(checkpoint_name(step)))?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    params.save(&final_checkpoint)?;
    Ok(TrainSummary {
        final_checkpoint,
        log: log_path,
        history,
        skipped,
    })
}

/// Parses a training log back into `(step, total, contrastive, detector, τ)`.
pub fn read_log(path: &Path) -> Result<Vec<(usize, [f32; 4])>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(TrainError::Data(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = || TrainError::Data(format!("{}:{}: malformed row", path.display(), k + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let step = f[0].parse().map_err(|_| bad())?;
            let mut v = [0f32; 4];
            for (o, s) in v.iter_mut().zip(&f[1..]) {
                *o = s.parse().map_err(|_| bad())?;
            }
            Ok((step, v))
        })
        .collect()
}
