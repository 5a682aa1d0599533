use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BlockSpec, ModelConfig, NormKind};
use super::NetError;
use crate::numcore::{BatchMoments, BlockKind, Tensor};

pub const LOG_TEMPERATURE: &str = "log_temperature";
const INPUT_SIZE: &str = "meta.input_size";
const MAGIC: &[u8; 4] = b"R23D";
const VERSION: u32 = 1;
/// Running-average update weight of new batch statistics.
pub const NORM_MOMENTUM: f32 = 0.1;

/// Learnable tensors plus non-learnable buffers (running statistics, input size).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

fn weight_shape(b: &BlockSpec) -> Vec<usize> {
    match b.kind {
        BlockKind::Conv3x3 => vec![b.cout, b.cin, 3, 3],
        BlockKind::Pointwise => vec![b.cout, b.cin],
    }
}

/// Expected parameter and buffer shapes for a configuration.
fn expected(config: &ModelConfig) -> (BTreeMap<String, Vec<usize>>, BTreeMap<String, Vec<usize>>) {
    let mut p = BTreeMap::new();
    let mut bufs = BTreeMap::new();
    for b in config.blocks() {
        let l = b.layer();
        p.insert(format!("{}.{l}.weight", b.name), weight_shape(&b));
        p.insert(format!("{}.{l}.bias", b.name), vec![b.cout]);
        if !b.projection {
            p.insert(format!("{}.norm.gamma", b.name), vec![b.cout]);
            p.insert(format!("{}.norm.beta", b.name), vec![b.cout]);
            if config.norm == NormKind::Batch {
                bufs.insert(format!("{}.norm.running_mean", b.name), vec![b.cout]);
                bufs.insert(format!("{}.norm.running_var", b.name), vec![b.cout]);
            }
        }
    }
    p.insert(LOG_TEMPERATURE.into(), vec![1]);
    bufs.insert(INPUT_SIZE.into(), vec![3]);
    (p, bufs)
}

impl ModelParams {
    /// He-normal weights (unit-gain for projections), zero biases, unit gamma.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for b in config.blocks() {
            let l = b.layer();
            let fan_in = match b.kind {
                BlockKind::Conv3x3 => b.cin * 9,
                BlockKind::Pointwise => b.cin,
            };
            let gain = if b.projection { 1.0 } else { 2.0 };
            let dist = Normal::new(0.0f32, (gain / fan_in as f32).sqrt()).expect("finite std");
            let shape = weight_shape(&b);
            let n: usize = shape.iter().product();
            let w: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            params.insert(format!("{}.{l}.weight", b.name), Tensor::new(shape, w)?.tracked());
            params.insert(format!("{}.{l}.bias", b.name), Tensor::zeros(vec![b.cout]).tracked());
            if !b.projection {
                params.insert(format!("{}.norm.gamma", b.name), Tensor::full(vec![b.cout], 1.0).tracked());
                params.insert(format!("{}.norm.beta", b.name), Tensor::zeros(vec![b.cout]).tracked());
                if config.norm == NormKind::Batch {
                    buffers.insert(format!("{}.norm.running_mean", b.name), Tensor::zeros(vec![b.cout]));
                    buffers.insert(format!("{}.norm.running_var", b.name), Tensor::full(vec![b.cout], 1.0));
                }
            }
        }
        params.insert(
            LOG_TEMPERATURE.into(),
            Tensor::scalar(config.temperature_init.ln()).tracked(),
        );
        buffers.insert(INPUT_SIZE.into(), input_size_tensor(config));
        Ok(Self {
            config: config.clone(),
            params,
            buffers,
        })
    }

    pub fn temperature(&self) -> f32 {
        self.params[LOG_TEMPERATURE].item().exp()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Folds batch statistics into the running averages. Variances are
    /// converted to unbiased estimates first.
    pub fn update_running_stats(&mut self, moments: &[(String, BatchMoments)]) {
        if self.config.norm != NormKind::Batch {
            return;
        }
        for (block, m) in moments {
            let corr = if m.count > 1 {
                m.count as f32 / (m.count - 1) as f32
            } else {
                1.0
            };
            let mean = self
                .buffers
                .get_mut(&format!("{block}.norm.running_mean"))
                .expect("running mean buffer");
            for (r, &b) in mean.data_mut().iter_mut().zip(&m.mean) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
            }
            let var = self
                .buffers
                .get_mut(&format!("{block}.norm.running_var"))
                .expect("running var buffer");
            for (r, &b) in var.data_mut().iter_mut().zip(&m.var) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b * corr;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut all: Vec<(&String, &Tensor)> = self.params.iter().chain(self.buffers.iter()).collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in all {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads a checkpoint; the configuration is recovered from the tensor
    /// names and shapes, then the full name/shape set is verified.
    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = fs::read(path).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries = parse_checkpoint(&bytes).map_err(|m| NetError::Checkpoint(format!("{}: {m}", path.display())))?;
        Self::from_entries(entries).map_err(|e| match e {
            NetError::Checkpoint(m) => NetError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_entries(entries: BTreeMap<String, Tensor>) -> Result<Self, NetError> {
        let config = infer_config(&entries)?;
        let (pshapes, bshapes) = expected(&config);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for (name, t) in entries {
            if let Some(s) = pshapes.get(&name) {
                if t.shape() != s.as_slice() {
                    return Err(NetError::Checkpoint(format!("`{name}` has shape {:?}, expected {s:?}", t.shape())));
                }
                params.insert(name, t.tracked());
            } else if let Some(s) = bshapes.get(&name) {
                if t.shape() != s.as_slice() {
                    return Err(NetError::Checkpoint(format!("`{name}` has shape {:?}, expected {s:?}", t.shape())));
                }
                buffers.insert(name, t);
            } else {
                return Err(NetError::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        for name in pshapes.keys().chain(bshapes.keys()) {
            if !params.contains_key(name) && !buffers.contains_key(name) {
                return Err(NetError::Checkpoint(format!("missing tensor `{name}`")));
            }
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }
}

fn input_size_tensor(config: &ModelConfig) -> Tensor {
    Tensor::new(
        vec![3],
        vec![config.height as f32, config.width as f32, config.vertices as f32],
    )
    .expect("three values")
}

fn parse_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], String> {
        if pos + n > bytes.len() {
            return Err(format!("truncated at byte {pos}"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?) as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("`{name}`: {e}"))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate tensor `{name}`"));
        }
    }
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Ok(out)
}

/// Output width of every block under `prefix` in index order.
fn stage_widths(entries: &BTreeMap<String, Tensor>, prefix: &str, layer: &str) -> Vec<usize> {
    let mut widths = Vec::new();
    loop {
        match entries.get(&format!("{prefix}.{}.{layer}.weight", widths.len())) {
            Some(t) => widths.push(t.shape()[0]),
            None => return widths,
        }
    }
}

fn infer_config(entries: &BTreeMap<String, Tensor>) -> Result<ModelConfig, NetError> {
    let bad = |m: &str| NetError::Checkpoint(m.to_string());
    let mut local_widths = [0; 3];
    let mut local_blocks = [0; 3];
    for s in 0..3 {
        let w = stage_widths(entries, &format!("local.{s}"), "conv");
        if w.is_empty() || w.iter().any(|&x| x != w[0]) {
            return Err(bad(&format!("local stage {s} missing or uneven")));
        }
        local_widths[s] = w[0];
        local_blocks[s] = w.len();
    }
    let det = stage_widths(entries, "detector", "conv");
    let sem = stage_widths(entries, "semantic", "conv");
    let global_widths = stage_widths(entries, "global", "conv");
    let point_widths = stage_widths(entries, "point", "linear");
    let final_widths = stage_widths(entries, "final", "linear");
    if det.is_empty() || sem.is_empty() || global_widths.is_empty() || point_widths.is_empty() || final_widths.is_empty() {
        return Err(bad("a network stage is missing"));
    }
    let size = entries.get(INPUT_SIZE).ok_or_else(|| bad("missing input size"))?.data().to_vec();
    if size.len() != 3 {
        return Err(bad("input size must hold three values"));
    }
    let norm = if entries.keys().any(|k| k.ends_with(".running_mean")) {
        NormKind::Batch
    } else {
        NormKind::Instance
    };
    let log_t = entries.get(LOG_TEMPERATURE).ok_or_else(|| bad("missing log temperature"))?;
    let config = ModelConfig {
        height: size[0] as usize,
        width: size[1] as usize,
        vertices: size[2] as usize,
        local_widths,
        local_blocks,
        detector_width: if det.len() > 1 { det[0] } else { 0 },
        detector_blocks: det.len(),
        semantic_width: if sem.len() > 1 { sem[0] } else { 0 },
        semantic_blocks: sem.len(),
        semantic_dim: *sem.last().unwrap(),
        global_widths,
        point_widths,
        final_widths,
        temperature_init: log_t.data()[0].exp(),
        norm,
    };
    config.validate()?;
    Ok(config)
}
