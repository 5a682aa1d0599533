mod common;

use std::collections::BTreeMap;

use common::grad::tiny_batch;
use common::oracle;
use common::{random_tensor, rng, synthetic_set, tiny_config};
use proptest::prelude::*;
use r23d::netarch::{ModelParams, NormKind};
use r23d::numcore::{AdamConfig, OptimizerState, Tensor};
use r23d::trainloop::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn scan_cells(labels: &[u8]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); 14];
    for part in 1..=14u8 {
        for (k, &l) in labels.iter().enumerate() {
            if l == part {
                out[part as usize - 1].push(k);
            }
        }
    }
    out
}

fn random_sets(r: &mut impl Rng, n: usize, background: bool) -> PartSets {
    let labels: Vec<u8> = (0..n)
        .map(|_| if background { r.random_range(0..=14) } else { r.random_range(1..=14) })
        .collect();
    if background {
        part_cell_indices(&labels, usize::MAX, r).unwrap()
    } else {
        vertex_part_indices(&labels).unwrap()
    }
}

#[test]
fn ten_cells_of_one_part() {
    let mut labels = vec![0u8; 64];
    labels[5..15].iter_mut().for_each(|l| *l = 3);
    let f = Tensor::zeros(&[4, 8, 8]);
    let sets = extract_part_sets(&f, &labels, 32, &mut rng(0)).unwrap();
    assert_eq!(sets.part(3).len(), 10);
    assert_eq!(sets.len(), 10);
    let empty = extract_part_sets(&f, &[0; 64], 32, &mut rng(0)).unwrap();
    assert!(empty.indices.iter().all(Vec::is_empty));
}

#[test]
fn spatial_mismatch_is_a_dimension_error() {
    let f = Tensor::zeros(&[4, 8, 8]);
    assert!(matches!(
        extract_part_sets(&f, &[1; 63], 32, &mut rng(0)),
        Err(TrainError::Num(_))
    ));
    assert!(matches!(
        extract_vertex_sets(&Tensor::zeros(&[4, 10]), &[1; 9]),
        Err(TrainError::Num(_))
    ));
}

#[test]
fn vertex_label_outside_range_is_a_data_error() {
    let f = Tensor::zeros(&[2, 3]);
    assert!(matches!(extract_vertex_sets(&f, &[1, 15, 2]), Err(TrainError::Data(_))));
    assert!(matches!(extract_vertex_sets(&f, &[1, 0, 2]), Err(TrainError::Data(_))));
}

#[test]
fn degenerate_and_balanced_vertex_labelings() {
    let all_one = extract_vertex_sets(&Tensor::zeros(&[2, 20]), &[1; 20]).unwrap();
    assert_eq!(all_one.part(1).len(), 20);
    assert!((2..=14).all(|p| all_one.part(p).is_empty()));

    let mut labels: Vec<u8> = (0..42).map(|k| (k % 14) as u8 + 1).collect();
    labels.shuffle(&mut rng(4));
    let balanced = extract_vertex_sets(&Tensor::zeros(&[2, 42]), &labels).unwrap();
    assert!((1..=14).all(|p| balanced.part(p).len() == 3));
}

#[test]
fn batch_sizes_sum_over_parts_and_samples() {
    let mut one = PartSets {
        indices: vec![Vec::new(); 14],
    };
    one.indices[0] = vec![0, 1];
    one.indices[1] = vec![2, 3, 4];
    let verts = vertex_part_indices(&[1, 2]).unwrap();
    let layout = BatchLayout::new(&[(0, &one)], &[(0, &verts)]).unwrap();
    assert_eq!(layout.pixel.len(), 5);

    let mut four = PartSets {
        indices: vec![Vec::new(); 14],
    };
    four.indices[6] = vec![1, 2, 3, 4];
    let layout = BatchLayout::new(&[(0, &four), (1, &four)], &[(0, &verts)]).unwrap();
    assert_eq!(layout.pixel.len(), 8);
}

#[test]
fn empty_side_signals_a_skip() {
    let empty = PartSets {
        indices: vec![Vec::new(); 14],
    };
    let verts = vertex_part_indices(&[1, 2]).unwrap();
    assert!(matches!(
        BatchLayout::new(&[(0, &empty)], &[(0, &verts)]),
        Err(TrainError::EmptyBatch { pixel_rows: 0, vertex_rows: 2 })
    ));
}

#[test]
fn batch_features_copy_the_named_columns() {
    let mut r = rng(9);
    let maps: Vec<Tensor> = (0..3).map(|_| random_tensor(&[5, 4, 4], -1.0, 1.0, &mut r)).collect();
    let clouds: Vec<Tensor> = (0..2).map(|_| random_tensor(&[5, 12], -1.0, 1.0, &mut r)).collect();
    let ps: Vec<PartSets> = (0..3).map(|_| random_sets(&mut r, 16, true)).collect();
    let vs: Vec<PartSets> = (0..2).map(|_| random_sets(&mut r, 12, false)).collect();
    let pixel: Vec<(u32, &Tensor, &PartSets)> = (0..3).map(|k| (k as u32 % 2, &maps[k], &ps[k])).collect();
    let vertex: Vec<(u32, &Tensor, &PartSets)> = (0..2).map(|k| (k as u32, &clouds[k], &vs[k])).collect();
    let b = build_batch_features(&pixel, &vertex).unwrap();
    assert_eq!(b.b_p.shape(), &[b.layout.pixel.len(), 5]);
    assert_eq!(b.b_v.shape(), &[b.layout.vertex.len(), 5]);
    for (row, p) in b.layout.pixel.iter().enumerate() {
        for c in 0..5 {
            assert_eq!(b.b_p.data()[row * 5 + c], maps[p.sample].data()[c * 16 + p.index]);
        }
    }
    for (row, v) in b.layout.vertex.iter().enumerate() {
        for c in 0..5 {
            assert_eq!(b.b_v.data()[row * 5 + c], clouds[v.sample].data()[c * 12 + v.index]);
        }
    }
}

#[test]
fn gt_examples() {
    let mut a = PartSets {
        indices: vec![Vec::new(); 14],
    };
    a.indices[0] = vec![0];
    a.indices[1] = vec![1];
    let verts = vertex_part_indices(&[1, 2]).unwrap();
    let same = BatchLayout::new(&[(7, &a)], &[(7, &verts)]).unwrap().ground_truth();
    assert_eq!(same.values, vec![1, 0, 0, 1]);
    let cross = BatchLayout::new(&[(7, &a)], &[(8, &verts)]).unwrap().ground_truth();
    assert_eq!(cross.positives(), 0);
}

#[test]
fn gt_matches_double_loop_on_random_provenance() {
    let t = oracle::gt_trials(20, 50);
    assert_eq!(t.worst, 0.0);
}

#[test]
fn contrastive_matches_64_bit_oracle() {
    let t = oracle::contrastive_trials(31, 100);
    assert!(t.worst < 1e-5, "{t:?}");
}

#[test]
fn contrastive_dimension_mismatch() {
    let gt = GroundTruth {
        rows: 2,
        cols: 2,
        values: vec![0; 4],
    };
    let a = Tensor::zeros(&[3, 4]);
    assert!(contrastive_loss(&a, &a, &gt, 0.0).is_err());
    assert!(contrastive_loss(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 5]), &gt, 0.0).is_err());
}

#[test]
fn detector_matches_64_bit_oracle() {
    let mut r = rng(32);
    for _ in 0..50 {
        let z = random_tensor(&[1, 4, 4], -6.0, 6.0, &mut r);
        let fg: Vec<bool> = (0..16).map(|_| r.random_bool(0.5)).collect();
        let got = detector_loss(&z, &fg).unwrap() as f64;
        let want = z
            .data()
            .iter()
            .zip(&fg)
            .map(|(&z, &y)| {
                let s = 1.0 / (1.0 + (-(z as f64)).exp());
                if y {
                    -s.ln()
                } else {
                    -(1.0 - s).ln()
                }
            })
            .sum::<f64>()
            / 16.0;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!(detector_loss(&Tensor::zeros(&[1, 4, 4]), &[true; 15]).is_err());
    let zero = detector_loss(&Tensor::zeros(&[1, 2, 2]), &[true, false, true, false]).unwrap();
    assert!((zero - std::f32::consts::LN_2).abs() < 1e-6);
}

fn scaled_rows(t: &Tensor, scales: &[f32]) -> Tensor {
    let c = t.shape()[1];
    let data = t
        .data()
        .chunks(c)
        .zip(scales)
        .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cell_extraction_matches_scan(seed in any::<u64>(), n in 1usize..200, cap in 1usize..40) {
        let mut r = rng(seed);
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..=14)).collect();
        let scan = scan_cells(&labels);
        let full = part_cell_indices(&labels, usize::MAX, &mut r).unwrap();
        prop_assert_eq!(&full.indices, &scan);
        let capped = part_cell_indices(&labels, cap, &mut r).unwrap();
        for (got, all) in capped.indices.iter().zip(&scan) {
            prop_assert_eq!(got.len(), all.len().min(cap));
            prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(got.iter().all(|k| all.contains(k)));
        }
    }

    #[test]
    fn vertex_extraction_partitions(seed in any::<u64>(), v in 1usize..300) {
        let mut r = rng(seed);
        let labels: Vec<u8> = (0..v).map(|_| r.random_range(1..=14)).collect();
        let sets = vertex_part_indices(&labels).unwrap();
        prop_assert_eq!(&sets.indices, &scan_cells(&labels));
        let mut union: Vec<usize> = sets.indices.concat();
        union.sort_unstable();
        prop_assert_eq!(union, (0..v).collect::<Vec<_>>());
    }

    #[test]
    fn batch_rows_follow_sorted_provenance(seed in any::<u64>(), samples in 1usize..5) {
        let mut r = rng(seed);
        let sets: Vec<PartSets> = (0..samples).map(|_| random_sets(&mut r, 30, false)).collect();
        let side: Vec<(u32, &PartSets)> = sets.iter().enumerate().map(|(k, s)| (k as u32, s)).collect();
        let layout = BatchLayout::new(&side, &side).unwrap();
        let mut sorted = layout.pixel.clone();
        sorted.sort_by_key(|p| (p.sample, p.part, p.index));
        prop_assert_eq!(&sorted, &layout.pixel);
        prop_assert_eq!(layout.pixel.len(), 30 * samples);
    }

    #[test]
    fn loss_ignores_positive_row_scale(seed in any::<u64>(), r_rows in 1usize..6, m_rows in 1usize..6) {
        let mut r = rng(seed);
        let b_p = random_tensor(&[r_rows, 4], -1.0, 1.0, &mut r);
        let b_v = random_tensor(&[m_rows, 4], -1.0, 1.0, &mut r);
        let gt = GroundTruth {
            rows: r_rows,
            cols: m_rows,
            values: (0..r_rows * m_rows).map(|_| r.random_bool(0.4) as u8).collect(),
        };
        let sp: Vec<f32> = (0..r_rows).map(|_| r.random_range(0.1..10.0)).collect();
        let sv: Vec<f32> = (0..m_rows).map(|_| r.random_range(0.1..10.0)).collect();
        let a = contrastive_loss(&b_p, &b_v, &gt, 2.3).unwrap();
        let b = contrastive_loss(&scaled_rows(&b_p, &sp), &scaled_rows(&b_v, &sv), &gt, 2.3).unwrap();
        prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
    }

    #[test]
    fn loss_ignores_batch_order(seed in any::<u64>(), samples in 2usize..5) {
        let mut r = rng(seed);
        let maps: Vec<Tensor> = (0..samples).map(|_| random_tensor(&[4, 3, 3], -1.0, 1.0, &mut r)).collect();
        let clouds: Vec<Tensor> = (0..samples).map(|_| random_tensor(&[4, 10], -1.0, 1.0, &mut r)).collect();
        let ps: Vec<PartSets> = (0..samples).map(|_| random_sets(&mut r, 9, true)).collect();
        let vs: Vec<PartSets> = (0..samples).map(|_| random_sets(&mut r, 10, false)).collect();
        let ids: Vec<u32> = (0..samples).map(|_| r.random_range(0..3)).collect();
        let loss = |order: &[usize]| -> Option<f32> {
            let pixel: Vec<_> = order.iter().map(|&k| (ids[k], &maps[k], &ps[k])).collect();
            let vertex: Vec<_> = order.iter().map(|&k| (ids[k], &clouds[k], &vs[k])).collect();
            let b = build_batch_features(&pixel, &vertex).ok()?;
            Some(contrastive_loss(&b.b_p, &b.b_v, &b.layout.ground_truth(), 2.0).unwrap())
        };
        let mut order: Vec<usize> = (0..samples).collect();
        let base = loss(&order);
        order.shuffle(&mut r);
        let permuted = loss(&order);
        match (base, permuted) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b),
            (None, None) => {}
            _ => prop_assert!(false, "skip signal depends on order"),
        }
    }
}

#[test]
fn zero_detector_weight_zeroes_detector_gradients() {
    let (params, batch) = tiny_batch(NormKind::Batch, 40, false);
    let g = compute_gradients(&params, &batch, 0.0).unwrap();
    let mut seen = 0;
    for (name, grad) in &g.grads {
        if name.starts_with("detector.") {
            seen += 1;
            assert!(grad.iter().all(|&v| v == 0.0), "{name} has nonzero gradient");
        }
    }
    assert!(seen > 0);
    let with = compute_gradients(&params, &batch, 1.0).unwrap();
    assert!(with.grads["detector.0.conv.weight"].iter().any(|&v| v != 0.0));
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let (mut params, batch) = tiny_batch(NormKind::Instance, 41, false);
    let before = params.params.clone();
    let mut opt = OptimizerState::new(AdamConfig {
        lr: 0.0,
        ..AdamConfig::default()
    });
    let losses = train_step(&batch, &mut params, &mut opt, 1.0).unwrap();
    assert!(losses.total.is_finite());
    for (name, t) in &before {
        assert_eq!(t.data(), params.params[name].data(), "{name} moved");
    }
}

#[test]
fn fixed_batch_overfits_in_fifty_steps() {
    let (mut params, batch) = tiny_batch(NormKind::Batch, 42, false);
    let mut opt = OptimizerState::new(AdamConfig::default());
    let first = train_step(&batch, &mut params, &mut opt, 1.0).unwrap();
    let mut last = first;
    for _ in 1..50 {
        last = train_step(&batch, &mut params, &mut opt, 1.0).unwrap();
    }
    assert!(
        last.contrastive < 0.5 * first.contrastive,
        "{} -> {}",
        first.contrastive,
        last.contrastive
    );
}

fn small_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_identities: 2,
        images_per_identity: 2,
        steps,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

fn file_bytes(p: &std::path::Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn zero_steps_saves_the_initialization() {
    let model = tiny_config(NormKind::Batch);
    let set = synthetic_set(&model, 3, 2, 50);
    let dir = tempfile::tempdir().unwrap();
    let s = train_on(&set, &model, &small_cfg(0), dir.path()).unwrap();
    let init = ModelParams::init(&model, small_cfg(0).seed).unwrap();
    let saved = ModelParams::load(&s.final_checkpoint).unwrap();
    for (name, t) in &init.params {
        assert_eq!(t.data(), saved.params[name].data());
    }
    assert_eq!(read_log(&s.log).unwrap().len(), 0);
}

#[test]
fn same_seed_gives_identical_runs() {
    let model = tiny_config(NormKind::Batch);
    let set = synthetic_set(&model, 3, 2, 51);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = train_on(&set, &model, &small_cfg(5), a.path()).unwrap();
    let sb = train_on(&set, &model, &small_cfg(5), b.path()).unwrap();
    assert_eq!(file_bytes(&sa.final_checkpoint), file_bytes(&sb.final_checkpoint));
    assert_eq!(file_bytes(&sa.log), file_bytes(&sb.log));
    for step in [2, 4] {
        assert!(a.path().join(checkpoint_name(step)).is_file());
    }
    assert!(!a.path().join(checkpoint_name(5)).exists());

    let other = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        seed: 8,
        ..small_cfg(5)
    };
    let sc = train_on(&set, &model, &cfg, other.path()).unwrap();
    assert_ne!(file_bytes(&sa.final_checkpoint), file_bytes(&sc.final_checkpoint));
}

#[test]
fn log_rows_are_finite_with_positive_temperature() {
    let model = tiny_config(NormKind::Instance);
    let set = synthetic_set(&model, 2, 3, 52);
    let dir = tempfile::tempdir().unwrap();
    let s = train_on(&set, &model, &small_cfg(6), dir.path()).unwrap();
    let text = std::fs::read_to_string(&s.log).unwrap();
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    let rows = read_log(&s.log).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    for (_, [total, contrastive, detector, tau]) in rows {
        assert!(total.is_finite() && contrastive.is_finite() && detector.is_finite());
        assert!(tau.is_finite() && tau > 0.0);
        assert!((total - contrastive - detector).abs() < 1e-5);
    }
}

#[test]
fn missing_manifest_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere/manifest.jsonl");
    let err = train(&tiny_config(NormKind::Batch), &small_cfg(1), &missing, dir.path()).unwrap_err();
    assert!(matches!(err, TrainError::Io { .. }));
    assert!(err.to_string().contains("nowhere"), "{err}");
}

#[test]
fn too_few_identities_is_a_config_error() {
    let model = tiny_config(NormKind::Batch);
    let set = synthetic_set(&model, 1, 2, 53);
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        train_on(&set, &model, &small_cfg(1), dir.path()),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn cross_pairs_add_one_cloud_per_image() {
    let model = tiny_config(NormKind::Batch);
    let set = synthetic_set(&model, 2, 2, 54);
    let plain = PreparedBatch::assemble(&set, &[0, 1, 2, 3], 4, false, &mut rng(1)).unwrap();
    let cross = PreparedBatch::assemble(&set, &[0, 1, 2, 3], 4, true, &mut rng(1)).unwrap();
    assert_eq!(plain.pairs, vec![(0, 0), (1, 0), (2, 1), (3, 1)]);
    assert_eq!(&cross.pairs[..4], &plain.pairs[..]);
    assert_eq!(&cross.pairs[4..], &[(0, 1), (1, 1), (2, 0), (3, 0)]);
    assert_eq!(cross.clouds.shape()[0], 8);
    let counts: BTreeMap<u32, usize> = cross.layout.vertex.iter().fold(BTreeMap::new(), |mut m, v| {
        *m.entry(v.identity).or_default() += 1;
        m
    });
    assert_eq!(counts.values().sum::<usize>(), 8 * model.vertices);
}
