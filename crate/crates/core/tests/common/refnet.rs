//! Straight-loop `f64` re-implementation of the network and objective, used as
//! an oracle. Every kink (ReLU side, pooling argmax) is appended to a
//! signature so finite differences can tell when a step crossed one.

#![allow(dead_code)]

use std::collections::BTreeMap;

use r23d::netarch::{BlockSpec, ModelParams, NormKind};
use r23d::numcore::BlockKind;
use r23d::trainloop::PreparedBatch;

pub const EPS: f64 = 1e-5;
pub const COS_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct T {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

impl T {
    pub fn new(shape: Vec<usize>, d: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), d.len());
        Self { shape, d }
    }

    pub fn from_f32(shape: &[usize], d: &[f32]) -> Self {
        Self::new(shape.to_vec(), d.iter().map(|&v| v as f64).collect())
    }
}

pub type Sig = Vec<u32>;

pub fn conv2d(x: &T, w: &[f64], b: &[f64], cout: usize) -> T {
    let (bn, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    assert_eq!(w.len(), cout * c * 9);
    let mut out = vec![0.0; bn * cout * h * wd];
    for s in 0..bn {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for i in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * c + i) * 3 + ky) * 3 + kx]
                                    * x.d[((s * c + i) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((s * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    T::new(vec![bn, cout, h, wd], out)
}

pub fn pointwise(x: &T, w: &[f64], b: &[f64], cout: usize) -> T {
    let (bn, c, n) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; bn * cout * n];
    for s in 0..bn {
        for o in 0..cout {
            for j in 0..n {
                let mut acc = b[o];
                for i in 0..c {
                    acc += w[o * c + i] * x.d[(s * c + i) * n + j];
                }
                out[(s * cout + o) * n + j] = acc;
            }
        }
    }
    T::new(vec![bn, cout, n], out)
}

pub enum Stats<'a> {
    Batch,
    Instance,
    Fixed(&'a [f64], &'a [f64]),
}

pub fn norm(x: &T, gamma: &[f64], beta: &[f64], stats: Stats<'_>) -> T {
    let (bn, c) = (x.shape[0], x.shape[1]);
    let n: usize = x.shape[2..].iter().product();
    let mut out = x.d.clone();
    let at = |s: usize, ch: usize, k: usize| (s * c + ch) * n + k;
    for ch in 0..c {
        let groups: Vec<Vec<usize>> = match stats {
            Stats::Instance => (0..bn).map(|s| vec![s]).collect(),
            _ => vec![(0..bn).collect()],
        };
        for g in groups {
            let (mean, var) = match stats {
                Stats::Fixed(m, v) => (m[ch], v[ch]),
                _ => {
                    let cnt = (g.len() * n) as f64;
                    let mean = g.iter().flat_map(|&s| (0..n).map(move |k| (s, k))).map(|(s, k)| x.d[at(s, ch, k)]).sum::<f64>() / cnt;
                    let var = g
                        .iter()
                        .flat_map(|&s| (0..n).map(move |k| (s, k)))
                        .map(|(s, k)| (x.d[at(s, ch, k)] - mean).powi(2))
                        .sum::<f64>()
                        / cnt;
                    (mean, var)
                }
            };
            for &s in &g {
                for k in 0..n {
                    let i = at(s, ch, k);
                    out[i] = gamma[ch] * (x.d[i] - mean) / (var + EPS).sqrt() + beta[ch];
                }
            }
        }
    }
    T::new(x.shape.clone(), out)
}

pub fn relu(x: &T, sig: &mut Sig) -> T {
    sig.extend(x.d.iter().map(|&v| (v > 0.0) as u32));
    T::new(x.shape.clone(), x.d.iter().map(|&v| v.max(0.0)).collect())
}

pub fn maxpool2(x: &T, sig: &mut Sig) -> T {
    let (bn, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = Vec::new();
    for p in 0..bn * c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let cand = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| x.d[p * h * w + (2 * y + dy) * w + 2 * xx + dx]);
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                sig.push(best as u32);
                out.push(cand[best]);
            }
        }
    }
    T::new(vec![bn, c, h / 2, w / 2], out)
}

pub fn max_trailing(x: &T, sig: &mut Sig) -> T {
    let n: usize = x.shape[2..].iter().product();
    let mut out = Vec::new();
    for row in x.d.chunks(n) {
        let mut best = 0;
        for k in 1..n {
            if row[k] > row[best] {
                best = k;
            }
        }
        sig.push(best as u32);
        out.push(row[best]);
    }
    T::new(vec![x.shape[0], x.shape[1]], out)
}

/// `g: [B,Cg]`, `l: [B,Cp,V]` -> `[B,Cg+Cp,V]`.
pub fn fuse(g: &T, l: &T) -> T {
    let (bn, cg) = (g.shape[0], g.shape[1]);
    let (cp, v) = (l.shape[1], l.shape[2]);
    let mut out = Vec::new();
    for s in 0..bn {
        for ch in 0..cg {
            out.extend(std::iter::repeat_n(g.d[s * cg + ch], v));
        }
        out.extend_from_slice(&l.d[s * cp * v..(s + 1) * cp * v]);
    }
    T::new(vec![bn, cg + cp, v], out)
}

/// `[B,C,N]` columns as rows `[R,C]`.
pub fn gather(x: &T, rows: &[(usize, usize)]) -> T {
    let (c, n) = (x.shape[1], x.shape[2]);
    let mut out = Vec::new();
    for &(s, p) in rows {
        for ch in 0..c {
            out.push(x.d[(s * c + ch) * n + p]);
        }
    }
    T::new(vec![rows.len(), c], out)
}

pub fn cosine(a: &T, b: &T) -> T {
    let (n, d) = (a.shape[0], a.shape[1]);
    let m = b.shape[0];
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ra = &a.d[i * d..(i + 1) * d];
        for j in 0..m {
            let rb = &b.d[j * d..(j + 1) * d];
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (norm(ra) * norm(rb)));
        }
    }
    T::new(vec![n, m], out)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean of `-[y ln σ(z) + (1-y) ln(1-σ(z))]`, using `-ln σ(z) = softplus(-z)`
/// and `-ln(1-σ(z)) = softplus(z)`.
pub fn bce_mean(z: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&zi, &yi) in z.iter().zip(y) {
        s += yi * softplus(-zi) + (1.0 - yi) * softplus(zi);
    }
    s / z.len() as f64
}

pub type P64 = BTreeMap<String, Vec<f64>>;

pub fn params64(p: &ModelParams) -> P64 {
    p.params
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

pub struct RefNet<'a> {
    pub model: &'a ModelParams,
    pub p: &'a P64,
    pub train: bool,
    pub sig: Sig,
}

pub struct ImageOut {
    pub semantic: T,
    pub detector: T,
    pub global: T,
}

impl<'a> RefNet<'a> {
    pub fn new(model: &'a ModelParams, p: &'a P64, train: bool) -> Self {
        Self {
            model,
            p,
            train,
            sig: Vec::new(),
        }
    }

    fn block(&mut self, spec: &BlockSpec, x: &T) -> T {
        let n = &spec.name;
        let l = spec.layer();
        let w = &self.p[&format!("{n}.{l}.weight")];
        let b = &self.p[&format!("{n}.{l}.bias")];
        let y = match spec.kind {
            BlockKind::Conv3x3 => conv2d(x, w, b, spec.cout),
            BlockKind::Pointwise => pointwise(x, w, b, spec.cout),
        };
        if spec.projection {
            return y;
        }
        let g = &self.p[&format!("{n}.norm.gamma")];
        let be = &self.p[&format!("{n}.norm.beta")];
        let y = match (self.model.config.norm, self.train) {
            (NormKind::Instance, _) => norm(&y, g, be, Stats::Instance),
            (NormKind::Batch, true) => norm(&y, g, be, Stats::Batch),
            (NormKind::Batch, false) => {
                let m: Vec<f64> = self.model.buffers[&format!("{n}.norm.running_mean")]
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let v: Vec<f64> = self.model.buffers[&format!("{n}.norm.running_var")]
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                norm(&y, g, be, Stats::Fixed(&m, &v))
            }
        };
        relu(&y, &mut self.sig)
    }

    fn stage(&mut self, prefix: &str, mut x: T) -> T {
        for spec in self.model.config.blocks().iter().filter(|b| b.name.starts_with(prefix)) {
            x = self.block(spec, &x);
        }
        x
    }

    pub fn image(&mut self, images: &T) -> ImageOut {
        let mut x = images.clone();
        for s in 0..3 {
            x = self.stage(&format!("local.{s}."), x);
            if s < 2 {
                x = maxpool2(&x, &mut self.sig);
            }
        }
        let detector = self.stage("detector.", x.clone());
        let semantic = self.stage("semantic.", x.clone());
        let g = self.stage("global.", x);
        let global = max_trailing(&g, &mut self.sig);
        ImageOut {
            semantic,
            detector,
            global,
        }
    }

    /// `global: [P,Cg]`, `clouds: [P,3,V]`.
    pub fn points(&mut self, global: &T, clouds: &T) -> T {
        let pl = self.stage("point.", clouds.clone());
        self.stage("final.", fuse(global, &pl))
    }

    pub fn log_temperature(&self) -> f64 {
        self.p[r23d::netarch::LOG_TEMPERATURE][0]
    }
}

/// Losses `(total, contrastive, detector)` of the training objective.
pub fn batch_loss(model: &ModelParams, p: &P64, batch: &PreparedBatch, lambda_det: f64) -> ((f64, f64, f64), Sig) {
    let mut net = RefNet::new(model, p, true);
    let img = net.image(&T::from_f32(batch.images.shape(), batch.images.data()));
    let cg = img.global.shape[1];
    let mut g = Vec::new();
    for &(s, _) in &batch.pairs {
        g.extend_from_slice(&img.global.d[s * cg..(s + 1) * cg]);
    }
    let global = T::new(vec![batch.pairs.len(), cg], g);
    let f_p = net.points(&global, &T::from_f32(batch.clouds.shape(), batch.clouds.data()));
    let s = &img.semantic.shape;
    let f_i = T::new(vec![s[0], s[1], s[2] * s[3]], img.semantic.d.clone());
    let bp = gather(&f_i, &batch.layout.pixel_rows());
    let bv = gather(&f_p, &batch.layout.vertex_rows());
    let gt = batch.layout.ground_truth();
    let tau = net.log_temperature().exp();
    let z: Vec<f64> = cosine(&bp, &bv).d.iter().map(|v| tau * v).collect();
    let y: Vec<f64> = gt.values.iter().map(|&v| v as f64).collect();
    let contrastive = bce_mean(&z, &y);
    let fg: Vec<f64> = batch.foreground.iter().map(|&f| f as u8 as f64).collect();
    let detector = bce_mean(&img.detector.d, &fg);
    ((contrastive + lambda_det * detector, contrastive, detector), net.sig)
}

/// Inference-mode confidences `σ(τ·cos)` of every detector-positive cell of
/// one image `[3,H,W]` against every vertex of a cloud `[3,V]`.
/// Returns `(foreground cells, [F*V] confidences)`.
pub fn confidences(model: &ModelParams, image: &[f32], hw: (usize, usize), cloud: &[f32]) -> (Vec<usize>, Vec<f64>) {
    let p = params64(model);
    let mut net = RefNet::new(model, &p, false);
    let img = net.image(&T::from_f32(&[1, 3, hw.0, hw.1], image));
    let v = cloud.len() / 3;
    let f_p = net.points(&img.global, &T::from_f32(&[1, 3, v], cloud));
    let (c, n) = (img.semantic.shape[1], img.semantic.shape[2] * img.semantic.shape[3]);
    let fg: Vec<usize> = (0..n).filter(|&k| img.detector.d[k] > 0.0).collect();
    let f_i = T::new(vec![1, c, n], img.semantic.d.clone());
    let rows: Vec<(usize, usize)> = fg.iter().map(|&k| (0, k)).collect();
    let cols: Vec<(usize, usize)> = (0..v).map(|j| (0, j)).collect();
    if fg.is_empty() {
        return (fg, Vec::new());
    }
    let sim = cosine(&gather(&f_i, &rows), &gather(&f_p, &cols));
    let tau = net.log_temperature().exp();
    (fg, sim.d.iter().map(|&s| sigmoid(tau * s)).collect())
}
