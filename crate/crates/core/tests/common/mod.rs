#![allow(dead_code)]

pub mod grad;
pub mod oracle;
pub mod refnet;

use std::collections::BTreeMap;

use r23d::avatar::{LabeledCloud, PartId};
use r23d::netarch::{ModelConfig, ModelParams, NormKind};
use r23d::numcore::Tensor;
use r23d::trainloop::{Example, Prototype, TrainingSet};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refnet::{Sig, P64};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// A model small enough for `f64` finite differences.
pub fn tiny_config(norm: NormKind) -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        vertices: 20,
        local_widths: [3, 4, 4],
        local_blocks: [1, 1, 2],
        detector_width: 3,
        detector_blocks: 2,
        semantic_width: 4,
        semantic_blocks: 2,
        semantic_dim: 5,
        global_widths: vec![4, 4],
        point_widths: vec![4, 6],
        final_widths: vec![6, 5],
        temperature_init: 10.0,
        norm,
    }
}

/// Perturbs biases, norm affine terms and running statistics away from
/// their initial values so every parameter influences the loss generically.
pub fn jitter(params: &mut ModelParams, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in params.params.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        } else if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.6..1.4));
        }
    }
    for (name, t) in params.buffers.iter_mut() {
        if name.ends_with("running_mean") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2));
        } else if name.ends_with("running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
        }
    }
}

/// Random images, cell grids and clouds for `identities` identities.
pub fn synthetic_set(config: &ModelConfig, identities: u32, per_identity: usize, seed: u64) -> TrainingSet {
    let mut r = rng(seed);
    let (h, w) = config.grid();
    let mut prototypes = BTreeMap::new();
    let mut examples = Vec::new();
    for id in 0..identities {
        let v = config.vertices;
        let points: Vec<[f64; 3]> = (0..v).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect();
        let parts: Vec<PartId> = (0..v)
            .map(|j| {
                let label = if j < 14 { j as u8 + 1 } else { r.random_range(1..=14u8) };
                PartId::from_label(label).unwrap()
            })
            .collect();
        prototypes.insert(id, Prototype::new(id, &LabeledCloud { points, parts }).unwrap());
        for _ in 0..per_identity {
            let image = random_tensor(&[3, config.height, config.width], -2.0, 2.0, &mut r);
            let cells: Vec<u8> = (0..h * w)
                .map(|_| if r.random_bool(0.3) { 0 } else { r.random_range(1..=14u8) })
                .collect();
            examples.push(Example {
                identity: id,
                image,
                cells,
            });
        }
    }
    TrainingSet::from_parts(examples, prototypes).unwrap()
}

/// Relative error with a floor on the denominator, so gradients that are
/// zero up to rounding compare on an absolute scale. Parameters feeding a
/// normalization directly (biases before instance norm) have an exact zero
/// gradient that f32 reproduces only to about 1e-7.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to one entry of `p`; `None` when
/// the kink signature differs between the two probes or from the base point.
pub fn central_difference(p: &P64, name: &str, index: usize, h: f64, f: &dyn Fn(&P64) -> (f64, Sig)) -> Option<f64> {
    let (_, base) = f(p);
    let mut q = p.clone();
    q.get_mut(name).unwrap()[index] += h;
    let (plus, sp) = f(&q);
    q.get_mut(name).unwrap()[index] -= 2.0 * h;
    let (minus, sm) = f(&q);
    (sp == base && sm == base).then(|| (plus - minus) / (2.0 * h))
}

#[derive(Debug)]
pub struct FdOutcome {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Checks `count` kink-free entries drawn from parameters whose names start
/// with `prefix`.
pub fn check_stage(
    p: &P64,
    grads: &BTreeMap<String, Vec<f32>>,
    prefix: &str,
    count: usize,
    h: f64,
    seed: u64,
    f: &dyn Fn(&P64) -> (f64, Sig),
) -> Vec<FdOutcome> {
    let mut r = rng(seed);
    let pool: Vec<(String, usize)> = p
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .flat_map(|(k, v)| (0..v.len()).map(move |i| (k.clone(), i)))
        .collect();
    assert!(!pool.is_empty(), "no parameters under `{prefix}`");
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < count.min(pool.len()) && attempts < 50 * count {
        attempts += 1;
        let (name, index) = pool.choose(&mut r).unwrap().clone();
        if out.iter().any(|o: &FdOutcome| o.name == name && o.index == index) && pool.len() > count {
            continue;
        }
        let Some(numeric) = central_difference(p, &name, index, h, f) else {
            continue;
        };
        let analytic = grads[&name][index] as f64;
        out.push(FdOutcome {
            rel: rel_err(analytic, numeric),
            name,
            index,
            analytic,
            numeric,
        });
    }
    out
}
