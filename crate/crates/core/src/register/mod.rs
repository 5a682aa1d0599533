//! Inference and evaluation.
//!
//! A probe image is run through the image branch once; detector-positive
//! cells are compared with every vertex of a gallery cloud (whose point
//! features are computed with the probe's global vector). Pairs whose
//! confidence `σ(τ · sim)` exceeds a threshold are correspondences, and the
//! correspondence rate ρ sums, over the 14 parts, the fraction of each part's
//! vertices matched at least once.

mod explain;
mod infer;
mod metrics;

use std::path::PathBuf;

use thiserror::Error;

use crate::avatar::AvatarError;
use crate::netarch::NetError;
use crate::numcore::NumError;
use crate::trainloop::TrainError;

pub use explain::{explain, overlay, Decision, Explanation, CONFLICT_FRACTION, PART_PALETTE, SUPPORT_FRACTION};
pub use infer::{
    confidence_matrix, infer_correspondences, probe_features, threshold_pairs, Correspondence, CorrespondenceSet,
    ProbeFeatures,
};
pub use metrics::{
    avg_matches_csv, avg_matches_per_class, confusion_matrix, correspondence_rate, evaluate, f1_csv, f1_per_class,
    identify, macro_f1, rank, reports_from_confidences, write_text, ClassF1, ConfusionMatrix, Evaluation,
    MatchReport, Probe, Ranked,
};

/// Default threshold and the sweep used for confusion matrices.
pub const DEFAULT_THETA: f32 = 0.9;
pub const THETA_SWEEP: [f32; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("evaluation configuration: {0}")]
    Config(String),
    #[error("evaluation data: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Avatar(#[from] AvatarError),
}
