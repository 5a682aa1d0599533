//! Learning phase.
//!
//! Each step draws a few identities with a couple of images each, runs every
//! image through the network paired with its own identity's prototype cloud,
//! and groups image cells and cloud vertices by body part. All pixel features
//! of the batch are compared with all vertex features; a pair is a positive
//! iff identity and part both match. The objective is the mean sigmoid BCE of
//! the temperature-scaled cosine similarities plus a weighted detector BCE
//! against the rendered foreground.

mod data;
mod loss;
mod run;
mod sets;
mod step;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avatar::AvatarError;
use crate::netarch::NetError;
use crate::numcore::NumError;

pub use data::{sample_members, Example, PreparedBatch, Prototype, TrainingSet};
pub use loss::{contrastive_loss, contrastive_on_tape, detector_loss, detector_on_tape};
pub use run::{checkpoint_name, read_log, train, train_on, TrainSummary, FINAL_CHECKPOINT, LOG_HEADER, TRAIN_LOG};
pub use sets::{
    build_batch_features, build_gt_matrix, extract_part_sets, extract_vertex_sets, part_cell_indices,
    vertex_part_indices, BatchFeatures, BatchLayout, GroundTruth, PartSets, Provenance,
};
pub use step::{batch_loss, compute_gradients, train_step, Gradients, LossVars, StepLosses};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    /// Data whose sizes disagree with the model configuration.
    #[error("data does not fit the model: {0}")]
    Shape(String),
    #[error("empty feature side ({pixel_rows} pixel rows, {vertex_rows} vertex rows)")]
    EmptyBatch { pixel_rows: usize, vertex_rows: usize },
    #[error("loss became non-finite ({0})")]
    Diverged(f32),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Avatar(#[from] AvatarError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_identities: usize,
    pub images_per_identity: usize,
    pub steps: usize,
    pub lr: f32,
    pub lambda_det: f32,
    /// Per-part cap on pixel features per image.
    pub n_cap: usize,
    pub seed: u64,
    /// Intermediate checkpoint cadence in steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Also pair every image with another identity's cloud.
    pub cross_pairs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_identities: 4,
            images_per_identity: 2,
            steps: 500,
            lr: 1e-3,
            lambda_det: 1.0,
            n_cap: 32,
            seed: 7,
            checkpoint_every: 100,
            cross_pairs: false,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_identities * self.images_per_identity
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_identities == 0 || self.images_per_identity == 0 {
            return fail("batch_identities and images_per_identity must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("lr must be finite and non-negative");
        }
        if !(self.lambda_det.is_finite() && self.lambda_det >= 0.0) {
            return fail("lambda_det must be finite and non-negative");
        }
        if self.n_cap == 0 {
            return fail("n_cap must be positive");
        }
        Ok(())
    }
}
