//! Reverse-mode tape.
//!
//! Every differentiable op appends one node holding its output value and what
//! the backward pass needs. `backward` walks the nodes in reverse push order.
//! Batched kernels split work across samples with rayon; partial gradients
//! that share a destination are summed afterwards in sample order, so results
//! do not depend on scheduling.

use rayon::prelude::*;

use super::gemm::{matmul, Mat};
use super::{sigmoid, NumError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a normalization layer obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Per-channel statistics over batch and spatial axes.
    Batch,
    /// Per-sample, per-channel statistics over spatial axes.
    Instance,
    /// Fixed statistics (inference with running averages).
    Fixed { mean: &'a [f32], var: &'a [f32] },
}

/// Statistics produced by a batch-statistics normalization, for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    /// Biased variance.
    pub var: Vec<f32>,
    pub count: usize,
}

pub const NORM_EPS: f32 = 1e-5;

enum NormSaved {
    /// Normalized values and one inverse std per statistics group.
    Grouped {
        normalized: Vec<f32>,
        inv_std: Vec<f32>,
        per_sample: bool,
    },
    Fixed {
        inv_std: Vec<f32>,
        normalized: Vec<f32>,
    },
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    MaxTrailing {
        x: Var,
        argmax: Vec<u32>,
    },
    Fuse {
        global: Var,
        local: Var,
    },
    Gather {
        x: Var,
        rows: Vec<(usize, usize)>,
    },
    Reshape {
        x: Var,
    },
    Cosine {
        a: Var,
        b: Var,
        a_hat: Vec<f32>,
        b_hat: Vec<f32>,
        a_norm: Vec<f32>,
        b_norm: Vec<f32>,
        a_clamped: Vec<bool>,
        b_clamped: Vec<bool>,
    },
    ScaleExp {
        x: Var,
        log_scale: Var,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<f32>,
    },
    Sum {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } | Op::Pointwise { x, w, b } => vec![*x, *w, *b],
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x }
            | Op::MaxPool2 { x, .. }
            | Op::MaxTrailing { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::Scale { x, .. } => vec![*x],
            Op::Fuse { global, local } => vec![*global, *local],
            Op::Cosine { a, b, .. } | Op::Mul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::ScaleExp { x, log_scale } => vec![*x, *log_scale],
            Op::SigmoidBce { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, detail: String) -> NumError {
    NumError::dim(op, detail)
}

/// Fills `cols` (`[c*9, h*w]`) with the zero-padded 3×3 neighbourhoods of `x` (`[c, h, w]`).
fn im2col3(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let ix = xo as isize + kx as isize - 1;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im3(cols: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for xo in 0..w {
                        let ix = xo as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            tracked,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, tracked, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// 3×3 convolution, stride 1, zero padding 1. `x: [B,C,H,W]`, `w: [C',C,3,3]`, `b: [C']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 {
            return Err(dim_err("conv2d", format!("input must be [B,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(dim_err("conv2d", format!("weights must be [C',C,3,3], got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(dim_err(
                "conv2d",
                format!("input channel axis {} vs weight axis 1 = {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(dim_err("conv2d", format!("bias {bs:?} vs output channels {}", ws[0])));
        }
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let hw = h * wd;
        let xd = self.data(x);
        let wdat = self.data(w);
        let bdat = self.data(b);
        let mut out = vec![0.0f32; bn * co * hw];
        out.par_chunks_mut(co * hw)
            .enumerate()
            .for_each(|(s, o)| {
                let mut cols = vec![0.0f32; c * 9 * hw];
                im2col3(&xd[s * c * hw..(s + 1) * c * hw], c, h, wd, &mut cols);
                for (oc, row) in o.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = bdat[oc]);
                }
                matmul(Mat::new(wdat, co, c * 9), Mat::new(&cols, c * 9, hw), o, true);
            });
        let value = Tensor::new(vec![bn, co, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }))
    }

    /// Shared per-position linear map. `x: [B,C,N]`, `w: [C',C]`, `b: [C']`.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 {
            return Err(dim_err("pointwise", format!("input must be [B,C,N], got {xs:?}")));
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(dim_err(
                "pointwise",
                format!("weights {ws:?} vs input channel axis {}", xs[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(dim_err("pointwise", format!("bias {bs:?} vs output channels {}", ws[0])));
        }
        let (bn, c, n) = (xs[0], xs[1], xs[2]);
        let co = ws[0];
        let xd = self.data(x);
        let wdat = self.data(w);
        let bdat = self.data(b);
        let mut out = vec![0.0f32; bn * co * n];
        out.par_chunks_mut(co * n).enumerate().for_each(|(s, o)| {
            for (oc, row) in o.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = bdat[oc]);
            }
            matmul(
                Mat::new(wdat, co, c),
                Mat::new(&xd[s * c * n..(s + 1) * c * n], c, n),
                o,
                true,
            );
        });
        let value = Tensor::new(vec![bn, co, n], out)?;
        Ok(self.push(value, Op::Pointwise { x, w, b }))
    }

    /// Per-channel affine normalization of `x: [B,C,...]`.
    ///
    /// Returns the batch moments when `stats` is [`NormStats::Batch`].
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(dim_err("norm", format!("input must be [B,C,...], got {xs:?}")));
        }
        let (bn, c) = (xs[0], xs[1]);
        let n: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(dim_err(
                    "norm",
                    format!("{name} {:?} vs channel axis {c}", self.shape(v)),
                ));
            }
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut out = vec![0.0f32; xd.len()];
        let mut normalized = vec![0.0f32; xd.len()];
        let idx = |s: usize, ch: usize| (s * c + ch) * n;
        let (saved, moments) = match stats {
            NormStats::Batch | NormStats::Instance => {
                let per_sample = matches!(stats, NormStats::Instance);
                let groups = if per_sample { bn * c } else { c };
                let mut means = vec![0.0f32; groups];
                let mut vars = vec![0.0f32; groups];
                let mut inv_std = vec![0.0f32; groups];
                let count = if per_sample { n } else { bn * n };
                for gi in 0..groups {
                    let samples: Vec<(usize, usize)> = if per_sample {
                        vec![(gi / c, gi % c)]
                    } else {
                        (0..bn).map(|s| (s, gi)).collect()
                    };
                    let mut sum = 0.0f32;
                    for &(s, ch) in &samples {
                        let part: f32 = xd[idx(s, ch)..idx(s, ch) + n].iter().sum();
                        sum += part;
                    }
                    let mean = sum / count as f32;
                    let mut sq = 0.0f32;
                    for &(s, ch) in &samples {
                        let part: f32 = xd[idx(s, ch)..idx(s, ch) + n]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum();
                        sq += part;
                    }
                    let var = sq / count as f32;
                    let is = 1.0 / (var + NORM_EPS).sqrt();
                    means[gi] = mean;
                    vars[gi] = var;
                    inv_std[gi] = is;
                    for &(s, ch) in &samples {
                        for k in idx(s, ch)..idx(s, ch) + n {
                            let z = (xd[k] - mean) * is;
                            normalized[k] = z;
                            out[k] = g[ch] * z + be[ch];
                        }
                    }
                }
                let moments = (!per_sample).then(|| BatchMoments {
                    mean: means,
                    var: vars,
                    count,
                });
                (
                    NormSaved::Grouped {
                        normalized,
                        inv_std,
                        per_sample,
                    },
                    moments,
                )
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err(
                        "norm",
                        format!("running stats of length {} / {} vs channels {c}", mean.len(), var.len()),
                    ));
                }
                let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                for s in 0..bn {
                    for ch in 0..c {
                        for k in idx(s, ch)..idx(s, ch) + n {
                            let z = (xd[k] - mean[ch]) * inv_std[ch];
                            normalized[k] = z;
                            out[k] = g[ch] * z + be[ch];
                        }
                    }
                }
                (NormSaved::Fixed { inv_std, normalized }, None)
            }
        };
        let value = Tensor::new(xs, out)?;
        Ok((
            self.push(
                value,
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    saved,
                },
            ),
            moments,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push(value, Op::Relu { x })
    }

    /// 2×2 max pooling with stride 2 over `[B,C,H,W]`; H and W must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err("maxpool2", format!("input must be [B,C,H,W], got {xs:?}")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err("maxpool2", format!("H={h}, W={w} must both be even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(bn * c * ho * wo);
        let mut argmax = Vec::with_capacity(bn * c * ho * wo);
        for plane in 0..bn * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let k = base + (2 * y + dy) * w + 2 * xo + dx;
                        if xd[k] > xd[best] {
                            best = k;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![bn, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    /// Maximum over all axes after the first two: `[B,C,...] -> [B,C]`.
    pub fn max_trailing(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(dim_err("max_trailing", format!("input must be [B,C,...], got {xs:?}")));
        }
        let n: usize = xs[2..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xs[0] * xs[1]);
        let mut argmax = Vec::with_capacity(xs[0] * xs[1]);
        for (row, chunk) in xd.chunks(n).enumerate() {
            let mut best = 0;
            for (k, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = k;
                }
            }
            out.push(chunk[best]);
            argmax.push((row * n + best) as u32);
        }
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(value, Op::MaxTrailing { x, argmax }))
    }

    /// Repeats `global: [B,Cg]` along the point axis of `local: [B,Cp,V]` and
    /// stacks it on top, giving `[B,Cg+Cp,V]`.
    pub fn fuse(&mut self, global: Var, local: Var) -> Result<Var> {
        let gs = self.shape(global).to_vec();
        let ls = self.shape(local).to_vec();
        if gs.len() != 2 || ls.len() != 3 || gs[0] != ls[0] {
            return Err(dim_err(
                "fuse",
                format!("expected [B,Cg] and [B,Cp,V], got {gs:?} and {ls:?}"),
            ));
        }
        let (bn, cg, cp, v) = (gs[0], gs[1], ls[1], ls[2]);
        let gd = self.data(global);
        let ld = self.data(local);
        let mut out = Vec::with_capacity(bn * (cg + cp) * v);
        for s in 0..bn {
            for ch in 0..cg {
                out.extend(std::iter::repeat_n(gd[s * cg + ch], v));
            }
            out.extend_from_slice(&ld[s * cp * v..(s + 1) * cp * v]);
        }
        let value = Tensor::new(vec![bn, cg + cp, v], out)?;
        Ok(self.push(value, Op::Fuse { global, local }))
    }

    /// Collects feature columns as rows: `x: [B,C,N]`, `rows[(sample, position)] -> [R,C]`.
    pub fn gather(&mut self, x: Var, rows: &[(usize, usize)]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(dim_err("gather", format!("input must be [B,C,N], got {xs:?}")));
        }
        if rows.is_empty() {
            return Err(dim_err("gather", "no rows requested".into()));
        }
        let (bn, c, n) = (xs[0], xs[1], xs[2]);
        if let Some(&(s, p)) = rows.iter().find(|&&(s, p)| s >= bn || p >= n) {
            return Err(dim_err(
                "gather",
                format!("row ({s},{p}) outside sample axis {bn} / position axis {n}"),
            ));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &(s, p) in rows {
            for ch in 0..c {
                out.push(xd[(s * c + ch) * n + p]);
            }
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Pairwise cosine similarity of the rows of `a: [N,D]` and `b: [M,D]`.
    ///
    /// Row norms are clamped below at `eps`, so zero rows give zero similarity.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f32) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(dim_err(
                "cosine_similarity",
                format!("feature axes differ: {as_:?} vs {bs:?}"),
            ));
        }
        let d = as_[1];
        let normalize = |data: &[f32]| {
            let mut hat = Vec::with_capacity(data.len());
            let mut norms = Vec::with_capacity(data.len() / d);
            let mut clamped = Vec::with_capacity(data.len() / d);
            for row in data.chunks(d) {
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                let denom = norm.max(eps);
                hat.extend(row.iter().map(|v| v / denom));
                norms.push(denom);
                clamped.push(norm <= eps);
            }
            (hat, norms, clamped)
        };
        let (a_hat, a_norm, a_clamped) = normalize(self.data(a));
        let (b_hat, b_norm, b_clamped) = normalize(self.data(b));
        let (n, m) = (as_[0], bs[0]);
        let mut out = vec![0.0f32; n * m];
        out.par_chunks_mut(m)
            .zip(a_hat.par_chunks(d))
            .for_each(|(row, ah)| {
                matmul(Mat::new(ah, 1, d), Mat::new(&b_hat, m, d).t(), row, false);
                row.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            });
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(
            value,
            Op::Cosine {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
                a_clamped,
                b_clamped,
            },
        ))
    }

    /// `x · exp(log_scale)` with a one-element `log_scale`.
    pub fn scale_exp(&mut self, x: Var, log_scale: Var) -> Result<Var> {
        if self.value(log_scale).numel() != 1 {
            return Err(dim_err(
                "scale_exp",
                format!("log scale must be scalar, got {:?}", self.shape(log_scale)),
            ));
        }
        let s = self.value(log_scale).item().exp();
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * s).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScaleExp { x, log_scale }))
    }

    /// Mean binary cross entropy of `sigmoid(logits)` against `targets` in {0,1},
    /// in the overflow-free form `max(z,0) - z·y + ln(1 + e^{-|z|})`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls != targets.shape() {
            return Err(dim_err(
                "sigmoid_bce",
                format!("logits {ls:?} vs targets {:?}", targets.shape()),
            ));
        }
        let z = self.data(logits);
        let y = targets.data();
        let row = *ls.last().unwrap();
        let mut total = 0.0f32;
        for (zr, yr) in z.chunks(row).zip(y.chunks(row)) {
            let mut partial = 0.0f32;
            for (&zi, &yi) in zr.iter().zip(yr) {
                partial += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
            }
            total += partial;
        }
        let mean = total / z.len() as f32;
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SigmoidBce {
                logits,
                targets: y.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f32 = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push(value, Op::Scale { x, factor })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                name,
                format!("operands {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op(a, b)))
    }

    /// Back-propagates from a scalar `loss`; tracked leaves accumulate into their
    /// gradient slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.node_backward(i, &g) {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => add_into(acc, &contribution),
                    None => grads[input.0] = Some(contribution),
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                self.nodes[i].value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } => {
                let xs = self.shape(*x);
                let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let co = self.shape(*w)[0];
                let hw = h * wd;
                let xd = self.data(*x);
                let wdat = self.data(*w);
                let need_x = tracked(*x);
                let need_w = tracked(*w);
                let per_sample: Vec<(Vec<f32>, Vec<f32>)> = (0..bn)
                    .into_par_iter()
                    .map(|s| {
                        let gs = &g[s * co * hw..(s + 1) * co * hw];
                        let mut dx = Vec::new();
                        if need_x {
                            let mut dcols = vec![0.0f32; c * 9 * hw];
                            matmul(
                                Mat::new(wdat, co, c * 9).t(),
                                Mat::new(gs, co, hw),
                                &mut dcols,
                                false,
                            );
                            dx = vec![0.0f32; c * hw];
                            col2im3(&dcols, c, h, wd, &mut dx);
                        }
                        let mut dw = Vec::new();
                        if need_w {
                            let mut cols = vec![0.0f32; c * 9 * hw];
                            im2col3(&xd[s * c * hw..(s + 1) * c * hw], c, h, wd, &mut cols);
                            dw = vec![0.0f32; co * c * 9];
                            matmul(Mat::new(gs, co, hw), Mat::new(&cols, c * 9, hw).t(), &mut dw, false);
                        }
                        (dx, dw)
                    })
                    .collect();
                let mut res = Vec::new();
                if need_x {
                    let dx: Vec<f32> = per_sample.iter().flat_map(|(dx, _)| dx.iter().copied()).collect();
                    res.push((*x, dx));
                }
                if need_w {
                    let mut dw = vec![0.0f32; co * c * 9];
                    for (_, p) in &per_sample {
                        add_into(&mut dw, p);
                    }
                    res.push((*w, dw));
                }
                if tracked(*b) {
                    res.push((*b, channel_sums(g, bn, co, hw)));
                }
                res
            }
            Op::Pointwise { x, w, b } => {
                let xs = self.shape(*x);
                let (bn, c, n) = (xs[0], xs[1], xs[2]);
                let co = self.shape(*w)[0];
                let xd = self.data(*x);
                let wdat = self.data(*w);
                let mut res = Vec::new();
                if tracked(*x) {
                    let mut dx = vec![0.0f32; bn * c * n];
                    dx.par_chunks_mut(c * n).enumerate().for_each(|(s, d)| {
                        matmul(
                            Mat::new(wdat, co, c).t(),
                            Mat::new(&g[s * co * n..(s + 1) * co * n], co, n),
                            d,
                            false,
                        );
                    });
                    res.push((*x, dx));
                }
                if tracked(*w) {
                    let partials: Vec<Vec<f32>> = (0..bn)
                        .into_par_iter()
                        .map(|s| {
                            let mut dw = vec![0.0f32; co * c];
                            matmul(
                                Mat::new(&g[s * co * n..(s + 1) * co * n], co, n),
                                Mat::new(&xd[s * c * n..(s + 1) * c * n], c, n).t(),
                                &mut dw,
                                false,
                            );
                            dw
                        })
                        .collect();
                    let mut dw = vec![0.0f32; co * c];
                    for p in &partials {
                        add_into(&mut dw, p);
                    }
                    res.push((*w, dw));
                }
                if tracked(*b) {
                    res.push((*b, channel_sums(g, bn, co, n)));
                }
                res
            }
            Op::Norm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let xs = self.shape(*x);
                let (bn, c) = (xs[0], xs[1]);
                let n: usize = xs[2..].iter().product();
                let gm = self.data(*gamma);
                let normalized = match saved {
                    NormSaved::Grouped { normalized, .. } | NormSaved::Fixed { normalized, .. } => {
                        normalized
                    }
                };
                let idx = |s: usize, ch: usize| (s * c + ch) * n;
                let mut res = Vec::new();
                if tracked(*gamma) {
                    let mut dg = vec![0.0f32; c];
                    for s in 0..bn {
                        for (ch, d) in dg.iter_mut().enumerate() {
                            let r = idx(s, ch)..idx(s, ch) + n;
                            let part: f32 = g[r.clone()].iter().zip(&normalized[r]).map(|(a, b)| a * b).sum();
                            *d += part;
                        }
                    }
                    res.push((*gamma, dg));
                }
                if tracked(*beta) {
                    res.push((*beta, channel_sums(g, bn, c, n)));
                }
                if tracked(*x) {
                    let mut dx = vec![0.0f32; g.len()];
                    match saved {
                        NormSaved::Fixed { inv_std, .. } => {
                            for s in 0..bn {
                                for ch in 0..c {
                                    let k = gm[ch] * inv_std[ch];
                                    for j in idx(s, ch)..idx(s, ch) + n {
                                        dx[j] = g[j] * k;
                                    }
                                }
                            }
                        }
                        NormSaved::Grouped {
                            inv_std,
                            per_sample,
                            ..
                        } => {
                            let groups = inv_std.len();
                            for gi in 0..groups {
                                let members: Vec<(usize, usize)> = if *per_sample {
                                    vec![(gi / c, gi % c)]
                                } else {
                                    (0..bn).map(|s| (s, gi)).collect()
                                };
                                let ch = members[0].1;
                                let count = (members.len() * n) as f32;
                                let mut sum_d = 0.0f32;
                                let mut sum_dz = 0.0f32;
                                for &(s, chm) in &members {
                                    for j in idx(s, chm)..idx(s, chm) + n {
                                        let d = g[j] * gm[ch];
                                        sum_d += d;
                                        sum_dz += d * normalized[j];
                                    }
                                }
                                let is = inv_std[gi];
                                for &(s, chm) in &members {
                                    for j in idx(s, chm)..idx(s, chm) + n {
                                        let d = g[j] * gm[ch];
                                        dx[j] = is / count * (count * d - sum_d - normalized[j] * sum_dz);
                                    }
                                }
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                res
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(&gi, &o)| if o > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::MaxPool2 { x, argmax } | Op::MaxTrailing { x, argmax } => {
                let mut dx = vec![0.0f32; self.value(*x).numel()];
                for (&k, &gi) in argmax.iter().zip(g) {
                    dx[k as usize] += gi;
                }
                vec![(*x, dx)]
            }
            Op::Fuse { global, local } => {
                let gs = self.shape(*global);
                let ls = self.shape(*local);
                let (bn, cg, cp, v) = (gs[0], gs[1], ls[1], ls[2]);
                let mut dg = vec![0.0f32; bn * cg];
                let mut dl = vec![0.0f32; bn * cp * v];
                for s in 0..bn {
                    let base = s * (cg + cp) * v;
                    for ch in 0..cg {
                        dg[s * cg + ch] = g[base + ch * v..base + (ch + 1) * v].iter().sum();
                    }
                    dl[s * cp * v..(s + 1) * cp * v]
                        .copy_from_slice(&g[base + cg * v..base + (cg + cp) * v]);
                }
                vec![(*global, dg), (*local, dl)]
            }
            Op::Gather { x, rows } => {
                let xs = self.shape(*x);
                let (c, n) = (xs[1], xs[2]);
                let mut dx = vec![0.0f32; self.value(*x).numel()];
                for (r, &(s, p)) in rows.iter().enumerate() {
                    for ch in 0..c {
                        dx[(s * c + ch) * n + p] += g[r * c + ch];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Cosine {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
                a_clamped,
                b_clamped,
            } => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let mut res = Vec::new();
                if tracked(*a) {
                    let mut dhat = vec![0.0f32; n * d];
                    matmul(Mat::new(g, n, m), Mat::new(b_hat, m, d), &mut dhat, false);
                    res.push((*a, unnormalize_grad(dhat, a_hat, a_norm, a_clamped, d)));
                }
                if tracked(*b) {
                    let mut dhat = vec![0.0f32; m * d];
                    matmul(Mat::new(g, n, m).t(), Mat::new(a_hat, n, d), &mut dhat, false);
                    res.push((*b, unnormalize_grad(dhat, b_hat, b_norm, b_clamped, d)));
                }
                res
            }
            Op::ScaleExp { x, log_scale } => {
                let s = self.value(*log_scale).item().exp();
                let mut res = Vec::new();
                if tracked(*x) {
                    res.push((*x, g.iter().map(|v| v * s).collect()));
                }
                if tracked(*log_scale) {
                    let d: f32 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                    res.push((*log_scale, vec![d]));
                }
                res
            }
            Op::SigmoidBce { logits, targets } => {
                let z = self.data(*logits);
                let scale = g[0] / z.len() as f32;
                let dz = z
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &yi)| (sigmoid(zi) - yi) * scale)
                    .collect();
                vec![(*logits, dz)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mul { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                vec![
                    (*a, g.iter().zip(bd).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(ad).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
        }
    }
}

fn channel_sums(g: &[f32], bn: usize, c: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c];
    for s in 0..bn {
        for (ch, o) in out.iter_mut().enumerate() {
            let part: f32 = g[(s * c + ch) * n..(s * c + ch + 1) * n].iter().sum();
            *o += part;
        }
    }
    out
}

/// Chain rule through `hat = row / max(|row|, eps)`.
fn unnormalize_grad(
    mut dhat: Vec<f32>,
    hat: &[f32],
    norms: &[f32],
    clamped: &[bool],
    d: usize,
) -> Vec<f32> {
    for (r, row) in dhat.chunks_mut(d).enumerate() {
        let h = &hat[r * d..(r + 1) * d];
        let inv = 1.0 / norms[r];
        if clamped[r] {
            row.iter_mut().for_each(|v| *v *= inv);
        } else {
            let proj: f32 = row.iter().zip(h).map(|(a, b)| a * b).sum();
            for (v, hv) in row.iter_mut().zip(h) {
                *v = (*v - hv * proj) * inv;
            }
        }
    }
    dhat
}
