use std::collections::BTreeMap;

use super::config::{BlockSpec, ModelConfig, NormKind};
use super::params::{ModelParams, LOG_TEMPERATURE};
use super::NetError;
use crate::numcore::{apply_block, BatchMoments, BlockVars, NormStats, NumError, Tape, Tensor, Var};

/// Which normalization statistics blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters recorded on a tape as leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// `track = false` records constants, so nothing is differentiated.
    pub fn new(params: &ModelParams, tape: &mut Tape, track: bool) -> Self {
        let vars = params
            .params
            .iter()
            .map(|(k, t)| {
                let v = if track { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn log_temperature(&self) -> Var {
        self.var(LOG_TEMPERATURE)
    }

    /// Adds tape gradients of every bound leaf into the parameter grad slots.
    pub fn accumulate_grads(&self, tape: &Tape, params: &mut ModelParams) -> Result<(), NetError> {
        for (name, &v) in &self.vars {
            let p = params.params.get_mut(name).expect("bound parameter exists");
            match tape.grad(v) {
                Some(g) => p.accumulate_grad(g)?,
                None => return Err(NetError::Num(NumError::Contract(format!("`{name}` received no gradient")))),
            }
        }
        Ok(())
    }
}

/// Image-branch outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct ImageVars {
    /// `[B, C_l, H/4, W/4]`
    pub local: Var,
    /// `[B, 1, H/4, W/4]`
    pub detector: Var,
    /// `[B, C_s, H/4, W/4]`
    pub semantic: Var,
    /// `[B, C_g]`
    pub global: Var,
}

/// Forward pass builder over a tape.
pub struct Net<'a> {
    pub params: &'a ModelParams,
    pub bound: &'a Bound,
    pub mode: Mode,
    /// Batch statistics of every batch-normalized block, in execution order.
    pub moments: Vec<(String, BatchMoments)>,
}

fn stage_err(stage: &'static str) -> impl Fn(NumError) -> NetError {
    move |source| NetError::Stage { stage, source }
}

impl<'a> Net<'a> {
    pub fn new(params: &'a ModelParams, bound: &'a Bound, mode: Mode) -> Self {
        Self {
            params,
            bound,
            mode,
            moments: Vec::new(),
        }
    }

    fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn block(&mut self, tape: &mut Tape, spec: &BlockSpec, x: Var) -> Result<Var, NumError> {
        let l = spec.layer();
        let n = &spec.name;
        let vars = BlockVars {
            weight: self.bound.var(&format!("{n}.{l}.weight")),
            bias: self.bound.var(&format!("{n}.{l}.bias")),
            norm: (!spec.projection).then(|| {
                (
                    self.bound.var(&format!("{n}.norm.gamma")),
                    self.bound.var(&format!("{n}.norm.beta")),
                )
            }),
            relu: !spec.projection,
        };
        let buffers = &self.params.buffers;
        let stats = match (self.config().norm, self.mode) {
            (NormKind::Instance, _) => NormStats::Instance,
            (NormKind::Batch, Mode::Train) => NormStats::Batch,
            (NormKind::Batch, Mode::Eval) if !spec.projection => NormStats::Fixed {
                mean: buffers[&format!("{n}.norm.running_mean")].data(),
                var: buffers[&format!("{n}.norm.running_var")].data(),
            },
            (NormKind::Batch, Mode::Eval) => NormStats::Instance,
        };
        let (y, m) = apply_block(tape, spec.kind, x, &vars, stats)?;
        if let Some(m) = m {
            self.moments.push((n.clone(), m));
        }
        Ok(y)
    }

    fn run_stage(&mut self, tape: &mut Tape, prefix: &str, mut x: Var) -> Result<Var, NumError> {
        let specs: Vec<BlockSpec> = self
            .config()
            .blocks()
            .into_iter()
            .filter(|b| b.name.starts_with(prefix))
            .collect();
        for spec in &specs {
            x = self.block(tape, spec, x)?;
        }
        Ok(x)
    }

    /// `[B,3,H,W] -> [B,C_l,H/4,W/4]`: three block stages with a 2× max-pool
    /// after the first two.
    pub fn local_encoder(&mut self, tape: &mut Tape, images: Var) -> Result<Var, NetError> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(NetError::Stage {
                stage: "image_local_encoder",
                source: NumError::dim(
                    "image_local_encoder",
                    format!("expected [B,3,H,W] with H, W multiples of 4, got {s:?}"),
                ),
            });
        }
        let err = stage_err("image_local_encoder");
        let mut x = images;
        for stage in 0..3 {
            x = self.run_stage(tape, &format!("local.{stage}."), x).map_err(&err)?;
            if stage < 2 {
                x = tape.maxpool2(x).map_err(&err)?;
            }
        }
        Ok(x)
    }

    pub fn detector_head(&mut self, tape: &mut Tape, local: Var) -> Result<Var, NetError> {
        self.run_stage(tape, "detector.", local).map_err(stage_err("detector_head"))
    }

    pub fn semantic_head(&mut self, tape: &mut Tape, local: Var) -> Result<Var, NetError> {
        self.run_stage(tape, "semantic.", local).map_err(stage_err("semantic_head"))
    }

    /// Blocks then a global spatial max: `[B,C_l,h,w] -> [B,C_g]`.
    pub fn global_encoder(&mut self, tape: &mut Tape, local: Var) -> Result<Var, NetError> {
        let err = stage_err("global_encoder");
        let x = self.run_stage(tape, "global.", local).map_err(&err)?;
        tape.max_trailing(x).map_err(&err)
    }

    /// Shared per-vertex blocks: `[B,3,V] -> [B,C_p,V]`.
    pub fn point_encoder(&mut self, tape: &mut Tape, points: Var) -> Result<Var, NetError> {
        let s = tape.shape(points).to_vec();
        if s.len() != 3 || s[1] != 3 {
            return Err(NetError::Stage {
                stage: "point_encoder",
                source: NumError::dim("point_encoder", format!("expected [B,3,V], got {s:?}")),
            });
        }
        self.run_stage(tape, "point.", points).map_err(stage_err("point_encoder"))
    }

    pub fn fuse(&mut self, tape: &mut Tape, global: Var, point_local: Var) -> Result<Var, NetError> {
        tape.fuse(global, point_local).map_err(stage_err("fuse"))
    }

    pub fn final_encoder(&mut self, tape: &mut Tape, fused: Var) -> Result<Var, NetError> {
        self.run_stage(tape, "final.", fused).map_err(stage_err("final_encoder"))
    }

    pub fn image_branch(&mut self, tape: &mut Tape, images: Var) -> Result<ImageVars, NetError> {
        let local = self.local_encoder(tape, images)?;
        let detector = self.detector_head(tape, local)?;
        let semantic = self.semantic_head(tape, local)?;
        let global = self.global_encoder(tape, local)?;
        Ok(ImageVars {
            local,
            detector,
            semantic,
            global,
        })
    }

    /// `[B,C_g]` and `[B,3,V]` to `[B,C_f,V]`.
    pub fn point_branch(&mut self, tape: &mut Tape, global: Var, points: Var) -> Result<Var, NetError> {
        let pl = self.point_encoder(tape, points)?;
        let fused = self.fuse(tape, global, pl)?;
        self.final_encoder(tape, fused)
    }
}

/// Single-pair network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    /// `[C_s, H/4, W/4]`
    pub f_i: Tensor,
    /// `[1, H/4, W/4]`
    pub d_i_logits: Tensor,
    /// `[C_f, V]`
    pub f_p: Tensor,
}

/// Batched image-branch outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub f_i: Tensor,
    pub d_i_logits: Tensor,
    pub global: Tensor,
}

fn add_batch_axis(t: &Tensor) -> Result<Tensor, NetError> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    Ok(t.detached().reshape(s)?)
}

fn drop_batch_axis(t: &Tensor) -> Result<Tensor, NetError> {
    Ok(t.detached().reshape(t.shape()[1..].to_vec())?)
}

/// Stacks equally-shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor, NetError> {
    let first = items
        .first()
        .ok_or_else(|| NetError::Config("cannot stack zero tensors".into()))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(NetError::Num(NumError::dim(
                "stack",
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(shape, data)?)
}

/// Inference-mode image branch over `[B,3,H,W]`.
pub fn image_forward(params: &ModelParams, images: &Tensor) -> Result<ImageFeatures, NetError> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape, false);
    let mut net = Net::new(params, &bound, Mode::Eval);
    let x = tape.constant(images.detached());
    let out = net.image_branch(&mut tape, x)?;
    Ok(ImageFeatures {
        f_i: tape.value(out.semantic).detached(),
        d_i_logits: tape.value(out.detector).detached(),
        global: tape.value(out.global).detached(),
    })
}

/// Inference-mode point branch: `global: [B,C_g]`, `points: [B,3,V]`.
pub fn point_forward(params: &ModelParams, global: &Tensor, points: &Tensor) -> Result<Tensor, NetError> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape, false);
    let mut net = Net::new(params, &bound, Mode::Eval);
    let g = tape.constant(global.detached());
    let p = tape.constant(points.detached());
    let out = net.point_branch(&mut tape, g, p)?;
    Ok(tape.value(out).detached())
}

/// Inference-mode pass over one image `[3,H,W]` and one cloud `[3,V]`.
pub fn forward(params: &ModelParams, image: &Tensor, points: &Tensor) -> Result<ForwardOutputs, NetError> {
    let img = image_forward(params, &add_batch_axis(image)?)?;
    let fp = point_forward(params, &img.global, &add_batch_axis(points)?)?;
    Ok(ForwardOutputs {
        f_i: drop_batch_axis(&img.f_i)?,
        d_i_logits: drop_batch_axis(&img.d_i_logits)?,
        f_p: drop_batch_axis(&fp)?,
    })
}

/// Runs one inference stage over a single unbatched input.
fn single<F>(params: &ModelParams, input: &Tensor, f: F) -> Result<Tensor, NetError>
where
    F: FnOnce(&mut Net<'_>, &mut Tape, Var) -> Result<Var, NetError>,
{
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape, false);
    let mut net = Net::new(params, &bound, Mode::Eval);
    let x = tape.constant(add_batch_axis(input)?);
    let y = f(&mut net, &mut tape, x)?;
    drop_batch_axis(tape.value(y))
}

/// `[3,H,W] -> [C_l,H/4,W/4]`
pub fn image_local_encoder(params: &ModelParams, image: &Tensor) -> Result<Tensor, NetError> {
    single(params, image, |n, t, x| n.local_encoder(t, x))
}

/// `[C_l,h,w] -> [1,h,w]` logits.
pub fn detector_head(params: &ModelParams, local: &Tensor) -> Result<Tensor, NetError> {
    check_local(params, local, "detector_head")?;
    single(params, local, |n, t, x| n.detector_head(t, x))
}

/// `[C_l,h,w] -> [C_s,h,w]`
pub fn semantic_head(params: &ModelParams, local: &Tensor) -> Result<Tensor, NetError> {
    check_local(params, local, "semantic_head")?;
    single(params, local, |n, t, x| n.semantic_head(t, x))
}

/// `[C_l,h,w] -> [C_g]`
pub fn global_encoder(params: &ModelParams, local: &Tensor) -> Result<Tensor, NetError> {
    check_local(params, local, "global_encoder")?;
    single(params, local, |n, t, x| n.global_encoder(t, x))
}

/// `[3,V] -> [C_p,V]`
pub fn point_encoder(params: &ModelParams, points: &Tensor) -> Result<Tensor, NetError> {
    single(params, points, |n, t, x| n.point_encoder(t, x))
}

/// `[C_g]` and `[C_p,V]` to `[C_g+C_p,V]`.
pub fn fuse(global: &Tensor, point_local: &Tensor) -> Result<Tensor, NetError> {
    let mut tape = Tape::new();
    let g = tape.constant(add_batch_axis(global)?);
    let p = tape.constant(add_batch_axis(point_local)?);
    let y = tape.fuse(g, p).map_err(stage_err("fuse"))?;
    drop_batch_axis(tape.value(y))
}

/// `[C_g+C_p,V] -> [C_f,V]`
pub fn final_encoder(params: &ModelParams, fused: &Tensor) -> Result<Tensor, NetError> {
    single(params, fused, |n, t, x| n.final_encoder(t, x))
}

fn check_local(params: &ModelParams, local: &Tensor, stage: &'static str) -> Result<(), NetError> {
    let c = params.config.local_dim();
    if local.rank() != 3 || local.shape()[0] != c {
        return Err(NetError::Stage {
            stage,
            source: NumError::dim(stage, format!("expected [{c},h,w], got {:?}", local.shape())),
        });
    }
    Ok(())
}

/// RGB bytes (interleaved, row-major) to a normalized `[3,H,W]` tensor:
/// `(p/255 - 0.5) / 0.25`.
pub fn image_tensor(rgb: &[u8], height: usize, width: usize) -> Result<Tensor, NetError> {
    if rgb.len() != height * width * 3 {
        return Err(NetError::Config(format!(
            "RGB buffer holds {} bytes, expected {height}x{width}x3",
            rgb.len()
        )));
    }
    let hw = height * width;
    let mut data = vec![0.0f32; 3 * hw];
    for k in 0..hw {
        for c in 0..3 {
            data[c * hw + k] = (rgb[k * 3 + c] as f32 / 255.0 - 0.5) / 0.25;
        }
    }
    Ok(Tensor::new(vec![3, height, width], data)?)
}

/// Point list to `[3,V]`.
pub fn points_tensor(points: &[[f64; 3]]) -> Result<Tensor, NetError> {
    let v = points.len();
    let mut data = vec![0.0f32; 3 * v];
    for (j, p) in points.iter().enumerate() {
        for c in 0..3 {
            data[c * v + j] = p[c] as f32;
        }
    }
    Ok(Tensor::new(vec![3, v], data)?)
}

/// Detector decision per cell: `σ(z) > 0.5`, i.e. `z > 0`; ties are background.
pub fn binarize_detector(logits: &[f32]) -> Vec<bool> {
    logits.iter().map(|&z| z > 0.0).collect()
}
