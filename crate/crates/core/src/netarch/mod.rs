//! Two-branch network.
//!
//! The image branch runs a 12-block local encoder (two 2× max-pools) and
//! three heads on its output: a detector (foreground logits), a semantic head
//! (per-cell descriptors) and a global encoder (one pooled vector). The point
//! branch encodes each vertex with shared blocks, appends the image's global
//! vector to every vertex and runs a final per-vertex encoder whose output
//! width matches the semantic descriptors.
//!
//! Parameter names follow `<stage>.<index>.<layer>.<tensor>`, e.g.
//! `local.1.2.conv.weight` or `final.5.linear.bias`; the configuration can be
//! recovered from a checkpoint's names and shapes alone.

mod config;
mod forward;
mod params;

use std::path::PathBuf;

use thiserror::Error;

use crate::numcore::NumError;

pub use config::{BlockSpec, ModelConfig, NormKind};
pub use forward::{
    binarize_detector, detector_head, final_encoder, forward, fuse, global_encoder, image_forward,
    image_local_encoder, image_tensor, point_encoder, point_forward, points_tensor, semantic_head, stack, Bound,
    ForwardOutputs, ImageFeatures, ImageVars, Mode, Net,
};
pub use params::{ModelParams, LOG_TEMPERATURE, NORM_MOMENTUM};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: NumError,
    },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}
