mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uts_core::toy::{
    attention_pool, attention_weights, average_precision, contrastive_floor, eval_map, mean_pool, par_entropy_floor,
    planted_mtc, train_toy, AttentionParams, FeatureClip, ModelShape, Objective, PlantedConfig, PoolKind,
    ToyModelParams, TrainConfig,
};
use uts_core::{Error, Matrix};

use common::{cases, floors, random_matrix};

fn frames() -> impl Strategy<Value = Matrix> {
    (1usize..=6, 1usize..=4).prop_flat_map(|(t, h)| {
        prop::collection::vec(-5.0f64..5.0, t * 2 * h).prop_map(move |d| Matrix::from_vec(t, 2 * h, d).unwrap())
    })
}

proptest! {
    #[test]
    fn pooling_is_finite_and_order_free(f in frames(), seed in any::<u64>()) {
        let mean = mean_pool(&f).unwrap();
        let mut rev: Vec<&[f64]> = f.iter_rows().collect();
        rev.reverse();
        let back = Matrix::from_rows(&rev).unwrap();
        let again = mean_pool(&back).unwrap();
        for (a, b) in mean.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::random(f.cols(), 2, &mut rng).unwrap();
        prop_assert!(attention_pool(&f, &p).unwrap().iter().all(|v| v.is_finite()));
        let w = attention_weights(&f, &p).unwrap();
        for head in w.iter_rows() {
            prop_assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn model_gradients_all_objectives_and_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for i in 0..50 {
        if let Err(e) = cases::toy_model(&mut rng, i) {
            panic!("instance {i}: {e}");
        }
    }
}

#[test]
fn floors_match_enumeration() {
    assert_eq!(par_entropy_floor(3, 7, 0.0), 0.0);
    for (t, v, eps) in [(1, 2, 0.05), (1, 4, 0.5), (2, 3, 0.1), (2, 5, 1.0), (3, 4, 0.2)] {
        assert!((floors::par(t, v, eps) - par_entropy_floor(t, v, eps)).abs() < 1e-9, "{t} {v} {eps}");
    }
    for (m, c, tau) in [(1, 2, 0.1), (2, 2, 1.0), (3, 2, 0.07), (4, 3, 0.1), (3, 5, 0.3)] {
        let closed = contrastive_floor(m, c, tau).unwrap();
        assert!((floors::contrastive(m, c, tau) - closed).abs() < 1e-9, "{m} {c} {tau}");
    }
}

/// Precision at each positive, averaged, with no shared code.
fn naive_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    let mut total = 0.0;
    for &p in &positives {
        let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[p]).collect();
        let hits = above.iter().filter(|&&j| labels[j]).count();
        total += hits as f64 / above.len() as f64;
    }
    total / positives.len() as f64
}

#[test]
fn average_precision_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[rng.gen_range(0..n)] = true;
        let got = average_precision(&scores, &labels).unwrap();
        assert!((got - naive_ap(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn random_scores_give_the_positive_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    for rate in [0.5, 0.2] {
        let (m, k) = (10_000, 4);
        let scores = random_matrix(&mut rng, m, k, 1.0);
        let data = (0..m * k).map(|_| if rng.gen_bool(rate) { 1.0 } else { 0.0 }).collect();
        let labels = Matrix::from_vec(m, k, data).unwrap();
        let map = eval_map(&scores, &labels).unwrap().map;
        assert!((map - rate).abs() < 0.02, "rate {rate}: mAP {map}");
    }
}

#[test]
fn map_edge_cases() {
    let s = Matrix::from_rows(&[[0.9], [0.5], [0.1]]).unwrap();
    assert_eq!(eval_map(&s, &Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap()).unwrap().map, 1.0);
    let inverted = eval_map(&s, &Matrix::from_rows(&[[0.0], [0.0], [1.0]]).unwrap()).unwrap().map;
    assert!((inverted - 1.0 / 3.0).abs() < 1e-15);
    let two = Matrix::from_rows(&[[0.9, 0.2], [0.1, 0.3]]).unwrap();
    let report = eval_map(&two, &Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()).unwrap();
    assert_eq!(report.excluded, vec![1]);
    assert!(matches!(eval_map(&two, &Matrix::zeros(2, 2)), Err(Error::InvalidInput(_))));
}

fn small_set(clips: usize) -> (Vec<FeatureClip>, ModelShape) {
    let set = planted_mtc(&PlantedConfig {
        clips,
        features: 12,
        classes: 5,
        seed: 17,
        ..PlantedConfig::default()
    })
    .unwrap();
    let shape = set.model_shape(8, PoolKind::Attention { heads: 2 });
    (set.clips, shape)
}

#[test]
fn zero_learning_rate_keeps_the_trace_flat() {
    let (clips, shape) = small_set(100);
    let cfg = TrainConfig {
        steps: 30,
        batch: 8,
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let (params, trace) = train_toy(&clips, shape, &cfg).unwrap();
    assert_eq!(params, ToyModelParams::init(shape, cfg.seed).unwrap());
    assert_eq!(trace.len(), 31);
    assert!(trace.iter().all(|p| p.loss == trace[0].loss));
}

#[test]
fn same_seed_same_trace() {
    let (clips, shape) = small_set(200);
    for objective in [Objective::Mtc, Objective::Mtl { lambda: 0.2 }] {
        let mut clips = clips.clone();
        for c in &mut clips {
            c.tokens = c.label.clone();
        }
        let shape = ModelShape {
            seq: Some(uts_core::toy::SeqShape { max_len: 3, vocab: 5 }),
            ..shape
        };
        let cfg = TrainConfig {
            steps: 50,
            batch: 16,
            objective,
            seed: 5,
            ..TrainConfig::default()
        };
        let (pa, ta) = train_toy(&clips, shape, &cfg).unwrap();
        let (pb, tb) = train_toy(&clips, shape, &cfg).unwrap();
        assert_eq!(pa, pb);
        let bits = |t: &[uts_core::toy::TracePoint]| t.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ta), bits(&tb));
        let (_, tc) = train_toy(&clips, shape, &TrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(bits(&ta), bits(&tc));
    }
}

#[test]
fn loss_falls_window_by_window() {
    let set = planted_mtc(&PlantedConfig {
        clips: 2000,
        seed: 99,
        ..PlantedConfig::default()
    })
    .unwrap();
    let shape = set.model_shape(32, PoolKind::Mean);
    let (_, trace) = train_toy(&set.clips, shape, &TrainConfig::default()).unwrap();
    assert_eq!(trace.len(), 2001);
    let means: Vec<f64> = (1..10)
        .map(|w| trace[200 * w + 1..=200 * (w + 1)].iter().map(|p| p.loss).sum::<f64>() / 200.0)
        .collect();
    for pair in means.windows(2) {
        assert!(pair[1] <= pair[0], "window means rose: {means:?}");
    }
}

#[test]
fn non_finite_input_aborts_with_step() {
    let (mut clips, shape) = small_set(20);
    clips[0].frames.set(0, 0, f64::NAN);
    let cfg = TrainConfig {
        steps: 10,
        batch: 20,
        ..TrainConfig::default()
    };
    assert!(matches!(train_toy(&clips, shape, &cfg), Err(Error::NonFinite { .. })));
}

#[test]
fn forward_head_examples() {
    let (clips, shape) = small_set(3);
    let zero = ToyModelParams::zeros(shape).unwrap();
    assert!(zero.forward_mtc(&clips[0]).unwrap().iter().all(|&v| v == 0.0));
    let mut p = ToyModelParams::init(shape, 3).unwrap();
    let base = p.forward_mtc(&clips[1]).unwrap();
    p.mtc_w.as_mut().unwrap().scale(2.0);
    let doubled = p.forward_mtc(&clips[1]).unwrap();
    for (a, b) in base.iter().zip(&doubled) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
    let single = ToyModelParams::init(ModelShape { classes: 1, ..shape }, 3).unwrap();
    assert_eq!(single.forward_mtc(&clips[0]).unwrap().len(), 1);
}

#[test]
fn checkpoint_round_trip() {
    let (_, shape) = small_set(1);
    let p = ToyModelParams::init(shape, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    p.save(&path).unwrap();
    assert_eq!(ToyModelParams::load(&path).unwrap(), p);
}
