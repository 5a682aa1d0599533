//! Finite-difference suites shared by the gradient tests and the acceptance run.

use r23d::netarch::{ModelParams, NormKind};
use r23d::numcore::{NormStats, Tape, Tensor, Var};
use r23d::trainloop::{compute_gradients, PreparedBatch};
use rand::Rng;

use super::refnet::{self, Sig, Stats, T};
use super::{check_stage, jitter, random_tensor, rel_err, rng, synthetic_set, tiny_config};

pub const H: f64 = 1e-3;

#[derive(Debug)]
pub struct SuiteRow {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
}

type TapeFn = dyn Fn(&mut Tape, &[Var]) -> Var;
type RefFn = dyn Fn(&[T], &mut Sig) -> T;

/// Gradient of `Σ r · op(inputs)` on the tape versus central differences of
/// the `f64` reference. Every entry of every input is checked; entries whose
/// step crosses a kink are skipped.
fn check_op(inputs: &[Tensor], tape_fn: &TapeFn, ref_fn: &RefFn, seed: u64) -> (usize, f64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.detached().tracked())).collect();
    let y = tape_fn(&mut tape, &vars);
    let shape = tape.shape(y).to_vec();
    let mut r = rng(seed);
    let weights = random_tensor(&shape, -1.0, 1.0, &mut r);
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let base: Vec<T> = inputs.iter().map(|t| T::from_f32(t.shape(), t.data())).collect();
    let w64: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let eval = |xs: &[T]| -> (f64, Sig) {
        let mut sig = Vec::new();
        let y = ref_fn(xs, &mut sig);
        (y.d.iter().zip(&w64).map(|(a, b)| a * b).sum(), sig)
    };
    let (_, sig0) = eval(&base);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (i, t) in base.iter().enumerate() {
        for k in 0..t.d.len() {
            let mut xs = base.clone();
            xs[i].d[k] += H;
            let (plus, sp) = eval(&xs);
            xs[i].d[k] -= 2.0 * H;
            let (minus, sm) = eval(&xs);
            if sp != sig0 || sm != sig0 {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i][k] as f64, numeric));
            checked += 1;
        }
    }
    (checked, worst)
}

fn pos(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    random_tensor(shape, lo, hi, &mut rng(seed))
}

/// Every differentiable tape op on tensors of at most 64 elements.
pub fn op_suite(seed: u64) -> Vec<SuiteRow> {
    let mut rows = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, tf: &TapeFn, rf: &RefFn| {
        assert!(inputs.iter().all(|t| t.numel() <= 64), "{name}: input too large");
        let (checked, max_rel) = check_op(&inputs, tf, rf, seed ^ name.len() as u64);
        rows.push(SuiteRow {
            name: name.into(),
            checked,
            max_rel,
        });
    };
    let s = seed;
    run(
        "conv2d",
        vec![pos(&[2, 2, 4, 4], -1.0, 1.0, s), pos(&[3, 2, 3, 3], -1.0, 1.0, s + 1), pos(&[3], -1.0, 1.0, s + 2)],
        &|t, v| t.conv2d(v[0], v[1], v[2]).unwrap(),
        &|x, _| refnet::conv2d(&x[0], &x[1].d, &x[2].d, 3),
    );
    run(
        "pointwise",
        vec![pos(&[2, 3, 5], -1.0, 1.0, s), pos(&[4, 3], -1.0, 1.0, s + 1), pos(&[4], -1.0, 1.0, s + 2)],
        &|t, v| t.pointwise(v[0], v[1], v[2]).unwrap(),
        &|x, _| refnet::pointwise(&x[0], &x[1].d, &x[2].d, 4),
    );
    for (name, mode) in [("norm_batch", 0), ("norm_instance", 1), ("norm_fixed", 2)] {
        let mean = [0.1f32, -0.2, 0.3];
        let var = [0.5f32, 1.2, 0.8];
        run(
            name,
            vec![pos(&[2, 3, 6], -2.0, 2.0, s + 3), pos(&[3], 0.5, 1.5, s + 4), pos(&[3], -0.5, 0.5, s + 5)],
            &move |t, v| {
                let stats = match mode {
                    0 => NormStats::Batch,
                    1 => NormStats::Instance,
                    _ => NormStats::Fixed {
                        mean: &mean,
                        var: &var,
                    },
                };
                t.norm(v[0], v[1], v[2], stats).unwrap().0
            },
            &move |x, _| {
                let m: Vec<f64> = mean.iter().map(|&v| v as f64).collect();
                let va: Vec<f64> = var.iter().map(|&v| v as f64).collect();
                let stats = match mode {
                    0 => Stats::Batch,
                    1 => Stats::Instance,
                    _ => Stats::Fixed(&m, &va),
                };
                refnet::norm(&x[0], &x[1].d, &x[2].d, stats)
            },
        );
    }
    run(
        "relu",
        vec![pos(&[4, 16], -1.0, 1.0, s + 6)],
        &|t, v| t.relu(v[0]),
        &|x, sig| refnet::relu(&x[0], sig),
    );
    run(
        "maxpool2",
        vec![pos(&[1, 2, 4, 8], -1.0, 1.0, s + 7)],
        &|t, v| t.maxpool2(v[0]).unwrap(),
        &|x, sig| refnet::maxpool2(&x[0], sig),
    );
    run(
        "max_trailing",
        vec![pos(&[2, 3, 2, 5], -1.0, 1.0, s + 8)],
        &|t, v| t.max_trailing(v[0]).unwrap(),
        &|x, sig| refnet::max_trailing(&x[0], sig),
    );
    run(
        "fuse",
        vec![pos(&[2, 3], -1.0, 1.0, s + 9), pos(&[2, 2, 5], -1.0, 1.0, s + 10)],
        &|t, v| t.fuse(v[0], v[1]).unwrap(),
        &|x, _| refnet::fuse(&x[0], &x[1]),
    );
    let rows_idx = [(0usize, 3usize), (1, 0), (0, 3), (1, 4)];
    run(
        "gather",
        vec![pos(&[2, 3, 5], -1.0, 1.0, s + 11)],
        &move |t, v| t.gather(v[0], &rows_idx).unwrap(),
        &move |x, _| refnet::gather(&x[0], &rows_idx),
    );
    run(
        "reshape",
        vec![pos(&[2, 3, 4], -1.0, 1.0, s + 12)],
        &|t, v| t.reshape(v[0], &[6, 4]).unwrap(),
        &|x, _| T::new(vec![6, 4], x[0].d.clone()),
    );
    run(
        "cosine_similarity",
        vec![pos(&[4, 5], -1.0, 1.0, s + 13), pos(&[6, 5], -1.0, 1.0, s + 14)],
        &|t, v| t.cosine_similarity(v[0], v[1], 1e-8).unwrap(),
        &|x, _| refnet::cosine(&x[0], &x[1]),
    );
    run(
        "scale_exp",
        vec![pos(&[3, 4], -1.0, 1.0, s + 15), pos(&[1], 0.5, 1.5, s + 16)],
        &|t, v| t.scale_exp(v[0], v[1]).unwrap(),
        &|x, _| T::new(x[0].shape.clone(), x[0].d.iter().map(|a| a * x[1].d[0].exp()).collect()),
    );
    let targets = Tensor::new(vec![3, 4], (0..12).map(|k| (k % 3 == 0) as u8 as f32).collect()).unwrap();
    let t64: Vec<f64> = targets.data().iter().map(|&v| v as f64).collect();
    run(
        "sigmoid_bce",
        vec![pos(&[3, 4], -4.0, 4.0, s + 17)],
        &move |t, v| t.sigmoid_bce(v[0], &targets).unwrap(),
        &move |x, _| T::new(vec![1], vec![refnet::bce_mean(&x[0].d, &t64)]),
    );
    run(
        "sum",
        vec![pos(&[4, 4], -1.0, 1.0, s + 18)],
        &|t, v| t.sum(v[0]),
        &|x, _| T::new(vec![1], vec![x[0].d.iter().sum()]),
    );
    run(
        "mul",
        vec![pos(&[3, 5], -1.0, 1.0, s + 19), pos(&[3, 5], -1.0, 1.0, s + 20)],
        &|t, v| t.mul(v[0], v[1]).unwrap(),
        &|x, _| T::new(x[0].shape.clone(), x[0].d.iter().zip(&x[1].d).map(|(a, b)| a * b).collect()),
    );
    run(
        "add",
        vec![pos(&[3, 5], -1.0, 1.0, s + 21), pos(&[3, 5], -1.0, 1.0, s + 22)],
        &|t, v| t.add(v[0], v[1]).unwrap(),
        &|x, _| T::new(x[0].shape.clone(), x[0].d.iter().zip(&x[1].d).map(|(a, b)| a + b).collect()),
    );
    run(
        "scale",
        vec![pos(&[3, 5], -1.0, 1.0, s + 23)],
        &|t, v| t.scale(v[0], -0.7),
        &|x, _| T::new(x[0].shape.clone(), x[0].d.iter().map(|a| a * -0.7).collect()),
    );
    rows
}

pub const STAGES: [&str; 7] = ["local.", "detector.", "semantic.", "global.", "point.", "final.", "log_temperature"];

/// A small batch over random data for the tiny model.
pub fn tiny_batch(norm: NormKind, seed: u64, cross_pairs: bool) -> (ModelParams, PreparedBatch) {
    let config = tiny_config(norm);
    let mut params = ModelParams::init(&config, seed).unwrap();
    jitter(&mut params, seed + 1);
    let set = synthetic_set(&config, 2, 2, seed + 2);
    let mut r = rng(seed + 3);
    let batch = PreparedBatch::assemble(&set, &[0, 1, 2, 3], 4, cross_pairs, &mut r).unwrap();
    let _ = r.random::<u32>();
    (params, batch)
}

/// Full objective: analytic gradients against `f64` central differences on
/// `per_stage` parameters of every stage.
pub fn model_suite(norm: NormKind, seed: u64, per_stage: usize, lambda_det: f64) -> Vec<SuiteRow> {
    let (params, batch) = tiny_batch(norm, seed, true);
    let g = compute_gradients(&params, &batch, lambda_det as f32).unwrap();
    let p64 = refnet::params64(&params);
    let f = |p: &refnet::P64| {
        let (l, sig) = refnet::batch_loss(&params, p, &batch, lambda_det);
        (l.0, sig)
    };
    STAGES
        .iter()
        .enumerate()
        .map(|(k, stage)| {
            let out = check_stage(&p64, &g.grads, stage, per_stage, H, seed + 10 + k as u64, &f);
            SuiteRow {
                name: stage.trim_end_matches('.').to_string(),
                checked: out.len(),
                max_rel: out.iter().map(|o| o.rel).fold(0.0, f64::max),
            }
        })
        .collect()
}
