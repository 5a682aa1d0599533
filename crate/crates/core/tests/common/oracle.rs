//! Randomized comparisons against independent 64-bit implementations, shared
//! by the unit-level tests and the acceptance run.

use std::collections::BTreeSet;

use nalgebra::{Matrix4, Vector3, Vector4};
use r23d::avatar::*;
use r23d::netarch::{ModelParams, NormKind};
use r23d::numcore::{Tape, Tensor};
use r23d::register::{correspondence_rate, infer_correspondences, Correspondence, CorrespondenceSet};
use r23d::trainloop::{build_gt_matrix, contrastive_loss, GroundTruth, Prototype, Provenance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{jitter, random_tensor, refnet, rng, synthetic_set, tiny_config};

/// Worst disagreement over a number of trials.
#[derive(Debug)]
pub struct Trials {
    pub trials: usize,
    pub worst: f64,
}

pub fn provenance(r: &mut ChaCha8Rng, n: usize) -> Vec<Provenance> {
    (0..n)
        .map(|k| Provenance {
            sample: k,
            identity: r.random_range(0..3),
            part: r.random_range(1..=14),
            index: k,
        })
        .collect()
}

/// Count of wrong ground-truth entries against the double loop.
pub fn gt_trials(seed: u64, trials: usize) -> Trials {
    let mut r = rng(seed);
    let mut wrong = 0usize;
    for _ in 0..trials {
        let (np, nv) = (r.random_range(1..24), r.random_range(1..32));
        let (pix, ver) = (provenance(&mut r, np), provenance(&mut r, nv));
        let gt = build_gt_matrix(&pix, &ver);
        assert_eq!((gt.rows, gt.cols), (np, nv));
        for i in 0..np {
            for j in 0..nv {
                let expect = pix[i].identity == ver[j].identity && pix[i].part == ver[j].part;
                wrong += usize::from(gt.get(i, j) != expect as u8);
            }
        }
    }
    Trials {
        trials,
        worst: wrong as f64,
    }
}

/// Explicit cosine, temperature and BCE loops in 64-bit.
pub fn contrastive_oracle(p: &[Vec<f64>], v: &[Vec<f64>], gt: &GroundTruth, log_t: f64) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, a) in p.iter().enumerate() {
        for (j, b) in v.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let cos = dot / (norm(a) * norm(b)).max(1e-8);
            let s = 1.0 / (1.0 + (-(log_t.exp() * cos)).exp());
            let y = gt.get(i, j) as f64;
            total -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
        }
    }
    total / (p.len() * v.len()) as f64
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.iter().map(|&x| x as f64).collect()).collect()
}

pub fn contrastive_trials(seed: u64, trials: usize) -> Trials {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (np, nv, c) = (r.random_range(1..10), r.random_range(1..12), r.random_range(1..8));
        let b_p = random_tensor(&[np, c], -1.0, 1.0, &mut r);
        let b_v = random_tensor(&[nv, c], -1.0, 1.0, &mut r);
        let gt = GroundTruth {
            rows: np,
            cols: nv,
            values: (0..np * nv).map(|_| r.random_bool(0.3) as u8).collect(),
        };
        let log_t: f32 = r.random_range(0.0..3.0);
        let got = contrastive_loss(&b_p, &b_v, &gt, log_t).unwrap() as f64;
        let want = contrastive_oracle(&rows_of(&b_p), &rows_of(&b_v), &gt, log_t as f64);
        worst = worst.max((got - want).abs());
    }
    Trials { trials, worst }
}

pub fn pair_set(c: &CorrespondenceSet) -> BTreeSet<((usize, usize), usize)> {
    c.pairs.iter().map(|p| (p.cell, p.vertex)).collect()
}

/// A jittered tiny model with a low temperature, so confidences spread over
/// `(0, 1)`.
pub fn spread_model(seed: u64) -> ModelParams {
    let mut params = ModelParams::init(&tiny_config(NormKind::Batch), seed).unwrap();
    jitter(&mut params, seed + 1);
    params.params.get_mut("log_temperature").unwrap().data_mut()[0] = 1.0;
    params
}

/// Counts pairs that differ from the 64-bit enumeration of confidences above
/// θ. Pairs within 1e-5 of θ are left out as ambiguous. Each trial is one
/// (image, cloud, θ) with a fresh random input.
pub fn correspondence_trials(seed: u64, trials: usize) -> (Trials, usize) {
    let mut r = rng(seed);
    let (mut wrong, mut compared) = (0usize, 0usize);
    for t in 0..trials {
        let mut params = spread_model(seed.wrapping_mul(1000) + t as u64);
        // shift the detector's output bias so the foreground size varies
        let shift: f32 = r.random_range(0.0..1.5);
        for (name, p) in params.params.iter_mut() {
            if name.starts_with("detector.") && name.ends_with("bias") && p.numel() == 1 {
                p.data_mut()[0] += shift;
            }
        }
        let (height, width) = (params.config.height, params.config.width);
        let w = params.config.grid().1;
        let set = synthetic_set(&params.config, 1, 1, r.random());
        let (e, g) = (&set.examples[0], &set.prototypes[&0]);
        let theta: f32 = r.random_range(0.05..0.8);
        let (fg, conf) = refnet::confidences(&params, e.image.data(), (height, width), g.points.data());
        let got = infer_correspondences(&params, &e.image, g, theta).unwrap();
        wrong += usize::from(got.foreground != fg);
        let v = g.labels.len();
        let mut want = BTreeSet::new();
        let mut ambiguous = BTreeSet::new();
        for (row, &k) in fg.iter().enumerate() {
            for j in 0..v {
                let c = conf[row * v + j];
                let key = ((k / w, k % w), j);
                if (c - theta as f64).abs() < 1e-5 {
                    ambiguous.insert(key);
                } else if c > theta as f64 {
                    want.insert(key);
                }
            }
        }
        let got: BTreeSet<_> = pair_set(&got).difference(&ambiguous).copied().collect();
        wrong += got.symmetric_difference(&want).count();
        compared += want.len();
    }
    (
        Trials {
            trials,
            worst: wrong as f64,
        },
        compared,
    )
}

/// A prototype with the given labels at arbitrary positions.
pub fn labeled_cloud(labels: &[u8]) -> Prototype {
    let parts = labels.iter().map(|&l| PartId::from_label(l).unwrap()).collect();
    let points = (0..labels.len()).map(|j| [j as f64, 0.0, 1.0]).collect();
    Prototype::new(0, &LabeledCloud { points, parts }).unwrap()
}

/// Matches against the listed vertices, from one cell.
pub fn matched(cloud: &Prototype, vertices: &[usize]) -> CorrespondenceSet {
    CorrespondenceSet {
        pairs: vertices
            .iter()
            .map(|&j| Correspondence {
                cell: (0, 0),
                vertex: j,
                confidence: 0.95,
                part: cloud.labels[j],
            })
            .collect(),
        threshold: 0.9,
        gallery_identity: cloud.identity,
        foreground: vec![0],
        no_foreground: false,
    }
}

/// ρ recomputed by counting distinct matched vertices per part.
pub fn rate_oracle(labels: &[u8], vertices: &[usize]) -> f64 {
    let distinct: BTreeSet<usize> = vertices.iter().copied().collect();
    (1..=14u8)
        .map(|part| {
            let avail = labels.iter().filter(|&&l| l == part).count();
            let hit = distinct.iter().filter(|&&j| labels[j] == part).count();
            if avail == 0 {
                0.0
            } else {
                hit as f64 / avail as f64
            }
        })
        .sum()
}

pub fn rate_trials(seed: u64, trials: usize) -> Trials {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let v = r.random_range(1..80);
        let labels: Vec<u8> = (0..v).map(|_| r.random_range(1..=14)).collect();
        let c = labeled_cloud(&labels);
        let hits = r.random_range(0..2 * v);
        let vs: Vec<usize> = (0..hits).map(|_| r.random_range(0..v)).collect();
        let got = correspondence_rate(&matched(&c, &vs), &c).rho;
        worst = worst.max((got - rate_oracle(&labels, &vs)).abs());
    }
    Trials { trials, worst }
}

/// The tape convolution against the 64-bit loop, on random shapes.
pub fn conv2d_trials(seed: u64, trials: usize) -> Trials {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (b, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(1..7), r.random_range(1..7));
        let x = random_tensor(&[b, cin, h, w], -1.0, 1.0, &mut r);
        let k = random_tensor(&[cout, cin, 3, 3], -1.0, 1.0, &mut r);
        let bias = random_tensor(&[cout], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, kv, bv).unwrap();
        let want = refnet::conv2d(
            &refnet::T::from_f32(x.shape(), x.data()),
            &k.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &bias.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
            cout,
        );
        assert_eq!(tape.shape(y), want.shape.as_slice());
        for (a, b) in tape.value(y).data().iter().zip(&want.d) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    Trials { trials, worst }
}

/// Largest pixel error of `project` against a homogeneous 4×4 product over
/// `n` random points.
pub fn projection_error(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bbox = Aabb {
        min: Vector3::new(-0.5, -1.0, -0.3),
        max: Vector3::new(0.5, 0.9, 0.3),
    };
    let cam = sample_camera(seed, &bbox, 64, 64, &CameraConfig::default(), 0.0).unwrap();
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0))
        .collect();
    let proj = project(&cam, &pts);
    let p = cam.projection_row_major();
    let mut m = Matrix4::zeros();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = p[r * 4 + c];
        }
    }
    let mut worst: f64 = 0.0;
    for (x, got) in pts.iter().zip(&proj) {
        let h = m * Vector4::new(x[0], x[1], x[2], 1.0);
        assert!(got.valid);
        worst = worst.max((got.u - h.x / h.z).abs()).max((got.v - h.y / h.z).abs());
    }
    worst
}

/// Visible cloud vertices whose pixel carries their part label, and all
/// visible vertices, over `n` rendered samples.
pub fn visible_label_agreement(n: u64, size: usize, vertices: usize) -> (usize, usize) {
    let (mut agree, mut total) = (0, 0);
    for k in 0..n {
        let id = make_identity(k as u32, 40 + k, 0.3);
        let seeds = sample_seeds(11, Split::Train, (k % 4) as u32, k as u32);
        let (s, pose, cam) = generate_sample(&id, seeds, size, size, vertices, &RenderOptions::default()).unwrap();
        let cloud = pose_point_cloud(&id, &pose, vertices).unwrap();
        for (p, part) in project(&cam, &cloud.points).iter().zip(&cloud.parts) {
            let (x, y) = (p.u.floor() as usize, p.v.floor() as usize);
            let px = y * size + x;
            if !p.valid || s.fg_mask[px] == 0 || p.depth as f32 > s.depth[px] + 0.02 {
                continue;
            }
            total += 1;
            agree += (s.part_labels[px] == part.label()) as usize;
        }
    }
    (agree, total)
}
