use super::{BatchMoments, NormStats, NumError, Result, Tape, Tensor, Var};

/// Learnable pieces of one convolutional or per-point block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub weight: Var,
    pub bias: Var,
    /// `(gamma, beta)`; `None` disables normalization.
    pub norm: Option<(Var, Var)>,
    pub relu: bool,
}

/// Which linear map a block applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// 3×3, stride 1, padding 1 over `[B,C,H,W]`.
    Conv3x3,
    /// Shared linear map over `[B,C,N]`.
    Pointwise,
}

/// conv → norm → ReLU.
pub fn apply_block(
    tape: &mut Tape,
    kind: BlockKind,
    x: Var,
    block: &BlockVars,
    stats: NormStats<'_>,
) -> Result<(Var, Option<BatchMoments>)> {
    let mut y = match kind {
        BlockKind::Conv3x3 => tape.conv2d(x, block.weight, block.bias)?,
        BlockKind::Pointwise => tape.pointwise(x, block.weight, block.bias)?,
    };
    let mut moments = None;
    if let Some((gamma, beta)) = block.norm {
        let (n, m) = tape.norm(y, gamma, beta, stats)?;
        y = n;
        moments = m;
    }
    if block.relu {
        y = tape.relu(y);
    }
    Ok((y, moments))
}

/// Untracked single-image block: `x: [C,H,W]`, `weight: [C',C,3,3]`.
///
/// With `norm = Some((gamma, beta))` the image's own per-channel statistics
/// are used.
pub fn conv2d_block(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    norm: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(NumError::dim(
            "conv2d_block",
            format!("input must be [C,H,W], got {:?}", x.shape()),
        ));
    }
    let s = x.shape();
    if s[1] < 3 || s[2] < 3 {
        return Err(NumError::dim(
            "conv2d_block",
            format!("spatial axes H={}, W={} must be at least 3", s[1], s[2]),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.detached().reshape(vec![1, s[0], s[1], s[2]])?);
    let weight = tape.constant(weight.detached());
    let bias = tape.constant(bias.detached());
    let norm = norm.map(|(g, b)| (tape.constant(g.detached()), tape.constant(b.detached())));
    let block = BlockVars {
        weight,
        bias,
        norm,
        relu: true,
    };
    let (y, _) = apply_block(&mut tape, BlockKind::Conv3x3, xv, &block, NormStats::Instance)?;
    let out = tape.value(y).detached();
    let c = out.shape()[1];
    out.reshape(vec![c, s[1], s[2]])
}
