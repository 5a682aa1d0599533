//! Minimal differentiable core: tensors, a reverse-mode tape, the handful of
//! ops the network and losses need, and Adam.
//!
//! All arithmetic is `f32`. Reductions run left to right in a fixed order, so
//! the same op sequence on the same inputs reproduces bit for bit.

mod adam;
mod block;
mod gemm;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, OptimizerState};
pub use block::{apply_block, conv2d_block, BlockKind, BlockVars};
pub use tape::{BatchMoments, NormStats, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f32 = 1e-8;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl NumError {
    pub(crate) fn dim(op: &'static str, detail: String) -> Self {
        NumError::Dimension { op, detail }
    }
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;

/// Untracked `[N,D] × [M,D] -> [N,M]` cosine similarity.
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.detached());
    let bv = tape.constant(b.detached());
    let s = tape.cosine_similarity(av, bv, COSINE_EPS)?;
    Ok(tape.value(s).detached())
}

/// Untracked mean sigmoid binary cross entropy.
pub fn sigmoid_bce(logits: &Tensor, targets: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.detached());
    let l = tape.sigmoid_bce(z, targets)?;
    Ok(tape.value(l).item())
}

/// Numerically safe logistic function.
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Untracked 2×2 max pooling of `[C,H,W]`.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(NumError::dim("maxpool2", format!("input must be [C,H,W], got {:?}", x.shape())));
    }
    let s = x.shape().to_vec();
    let mut tape = Tape::new();
    let v = tape.constant(x.detached().reshape(vec![1, s[0], s[1], s[2]])?);
    let y = tape.maxpool2(v)?;
    tape.value(y).detached().reshape(vec![s[0], s[1] / 2, s[2] / 2])
}

/// Untracked per-channel maximum over the vertex axis of `[D,V]`.
pub fn max_over_points(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(NumError::dim("max_over_points", format!("input must be [D,V], got {:?}", x.shape())));
    }
    let s = x.shape().to_vec();
    let mut tape = Tape::new();
    let v = tape.constant(x.detached().reshape(vec![1, s[0], s[1]])?);
    let y = tape.max_trailing(v)?;
    tape.value(y).detached().reshape(vec![s[0]])
}
