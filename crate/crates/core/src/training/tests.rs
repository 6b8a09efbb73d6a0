use alloc::vec::Vec;

use super::*;
use crate::linalg::{Matrix, Precision, Rng};

fn tiny_config(pred_bits: u32) -> (ModelConfig, ToyTaskSpec) {
    let spec = ToyTaskSpec::new(8);
    let cfg = ModelConfig {
        vocab: spec.vocab(),
        seq_len: 8,
        d: 16,
        heads: 2,
        layers: 2,
        ffn: 16,
        classes: 2,
        sigma: 0.5,
        pred_bits,
        share_projection: false,
        scale: true,
    };
    (cfg, spec)
}

fn batch(spec: &ToyTaskSpec, n: usize, seed: u64) -> Vec<(Vec<usize>, usize)> {
    make_toy_task(spec, n, &mut Rng::new(seed))
        .unwrap()
        .samples
        .into_iter()
        .map(|s| (s.tokens, s.label))
        .collect()
}

#[test]
fn mse_loss_examples() {
    let s = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
    assert_eq!(mse_loss(&[s.clone()], &[s.clone()], 1).unwrap(), 0.0);
    let ones = s.add(&Matrix::filled(2, 2, 1.0)).unwrap();
    assert_eq!(mse_loss(&[ones], &[s.clone()], 1).unwrap(), 4.0);
    assert!(mse_loss(&[s.clone()], &[], 1).is_err());
}

#[test]
fn zero_sparsity_matches_dense() {
    let (cfg, spec) = tiny_config(4);
    let model = ToyModel::new(cfg, 1).unwrap();
    let data = batch(&spec, 4, 2);
    for (tokens, label) in &data {
        let run = |mode| {
            let mut t = Tape::new(Precision::Standard);
            let p = model
                .forward(&mut t, tokens, Some(*label), &ForwardOptions::new(mode), &mut Rng::new(0))
                .unwrap();
            t.value(p.logits).clone()
        };
        let dense = run(AttentionMode::Dense);
        let dsa = run(AttentionMode::Sparse {
            sparsity: 0.0,
            policy: MaskPolicy::Predicted,
        });
        for (a, b) in dense.data().iter().zip(dsa.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn dense_readout_shortcut_is_exact() {
    let (cfg, spec) = tiny_config(4);
    let model = ToyModel::new(cfg, 8).unwrap();
    for (tokens, label) in &batch(&spec, 3, 6) {
        let run = |mode| {
            let mut t = Tape::new(Precision::Standard);
            let p = model
                .forward(&mut t, tokens, Some(*label), &ForwardOptions::new(mode), &mut Rng::new(0))
                .unwrap();
            let logits = t.value(p.logits).clone();
            let grads = t.backward(p.model_loss.unwrap(), model.params().len());
            (logits, grads)
        };
        // A zero post-softmax threshold keeps every entry but runs all rows.
        let (l_short, g_short) = run(AttentionMode::Dense);
        let (l_full, g_full) = run(AttentionMode::Threshold { theta: 0.0 });
        assert_eq!(l_short, l_full);
        // Gradient contributions are summed in a different order, so agreement
        // is to rounding.
        for (a, b) in g_short.iter().zip(&g_full) {
            match (a, b) {
                (Some(a), Some(b)) => assert!(a.sub(b).unwrap().max_abs() <= 1e-6 * (1.0 + b.max_abs())),
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
    }
}

#[test]
fn lambda_zero_total_is_model_loss() {
    let (cfg, spec) = tiny_config(4);
    let model = ToyModel::new(cfg, 3).unwrap();
    let mut opts = ForwardOptions::new(AttentionMode::Dense);
    opts.track_predictor = true;
    let bg = batch_gradients(&model, &batch(&spec, 3, 4), &opts, 0.0, MseReduction::Sum, &mut Rng::new(0)).unwrap();
    assert!(bg.loss.mse_loss > 0.0);
    assert_eq!(bg.loss.total, bg.loss.model_loss);
}

/// Central differences for every scalar of every parameter. Masks are a fixed
/// band so the loss is smooth; quantization is off because its forward map
/// is piecewise constant.
fn finite_difference_check(lambda: f64) {
    let (cfg, spec) = tiny_config(32);
    let model = ToyModel::new(cfg, 11).unwrap().with_precision(Precision::High);
    let data = batch(&spec, 2, 12);
    let mut opts = ForwardOptions::new(AttentionMode::Sparse {
        sparsity: 0.5,
        policy: MaskPolicy::LocalWindow,
    });
    opts.track_predictor = true;
    let loss_of = |m: &ToyModel| {
        batch_gradients(m, &data, &opts, lambda, MseReduction::PerElement, &mut Rng::new(0))
            .unwrap()
            .loss
            .total
    };
    let analytic = batch_gradients(&model, &data, &opts, lambda, MseReduction::PerElement, &mut Rng::new(0))
        .unwrap()
        .grads;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for pi in 0..model.params().len() {
        let base = model.params()[pi].value.clone();
        for e in 0..base.data().len() {
            let bumped = |delta: f64| {
                let mut m = model.clone();
                let mut d = base.data().to_vec();
                d[e] += delta;
                m.params_mut()[pi].value = Matrix::from_vec_with(base.rows(), base.cols(), d, Precision::High).unwrap();
                loss_of(&m)
            };
            let fd = (bumped(eps) - bumped(-eps)) / (2.0 * eps);
            let an = analytic[pi].as_ref().map_or(0.0, |g| g.data()[e]);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{} [{e}]: fd {fd:e} analytic {an:e}", model.params()[pi].name);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradients_match_finite_differences_without_mse() {
    finite_difference_check(0.0);
}

#[test]
fn gradients_match_finite_differences_with_mse() {
    finite_difference_check(0.01);
}

#[test]
fn mse_term_reaches_query_weights() {
    let (cfg, spec) = tiny_config(4);
    let model = ToyModel::new(cfg, 5).unwrap().with_precision(Precision::High);
    let data = batch(&spec, 2, 6);
    let mut opts = ForwardOptions::new(AttentionMode::Dense);
    opts.track_predictor = true;
    let grads = |lambda| {
        batch_gradients(&model, &data, &opts, lambda, MseReduction::PerElement, &mut Rng::new(0))
            .unwrap()
            .grads
    };
    let (g0, g1) = (grads(0.0), grads(0.01));
    let wq = model.params().iter().position(|p| p.name == "layer0.head0.w_q").unwrap();
    let diff = g1[wq].as_ref().unwrap().sub(g0[wq].as_ref().unwrap()).unwrap();
    assert!(diff.max_abs() > 0.0);
    let pq = model.params().iter().position(|p| p.name == "layer0.head0.pred_w_q").unwrap();
    assert!(g0[pq].is_none() || g0[pq].as_ref().unwrap().max_abs() == 0.0);
    assert!(g1[pq].as_ref().unwrap().max_abs() > 0.0);
}

#[test]
fn predictor_only_fit_reduces_mse() {
    let (mut cfg, spec) = tiny_config(4);
    cfg.sigma = 1.0;
    let model = ToyModel::new(cfg, 8).unwrap();
    let mut tc = TrainConfig::new(ScheduleKind::AdaptFinetune, 8);
    tc.sparse_steps = 200;
    tc.batch_size = 4;
    tc.freeze_model = true;
    tc.eval_samples = 16;
    tc.sparsity = 0.5;
    let before = model.params().to_vec();
    let out = train(&tc, &spec, model).unwrap();
    for (a, b) in before.iter().zip(out.model.params()) {
        if a.group == ParamGroup::Model {
            assert_eq!(a.value, b.value, "{} moved", a.name);
        }
    }
    let mse: Vec<f64> = out.history.iter().map(|h| h.loss.mse_loss).collect();
    let head: f64 = mse[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = mse[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "mse {head} -> {tail}");
}

#[test]
fn training_is_reproducible() {
    let (cfg, spec) = tiny_config(4);
    let mut tc = TrainConfig::new(ScheduleKind::FromScratchTwoPhase, 21);
    tc.dense_steps = 5;
    tc.sparse_steps = 5;
    tc.batch_size = 2;
    tc.eval_samples = 8;
    tc.policy = MaskPolicy::Random;
    let a = train(&tc, &spec, ToyModel::new(cfg.clone(), 21).unwrap()).unwrap();
    let b = train(&tc, &spec, ToyModel::new(cfg, 21).unwrap()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
}

#[test]
fn injected_scores_follow_oracle_trajectory() {
    let (cfg, spec) = tiny_config(4);
    let model = ToyModel::new(cfg, 31).unwrap();
    let data = batch(&spec, 3, 32);
    let oracle = ForwardOptions::new(AttentionMode::Sparse {
        sparsity: 0.5,
        policy: MaskPolicy::Oracle,
    });
    let mut oracle_tracked = oracle.clone();
    oracle_tracked.track_predictor = true;
    let mut injected = ForwardOptions::new(AttentionMode::Sparse {
        sparsity: 0.5,
        policy: MaskPolicy::Predicted,
    });
    injected.inject_exact_scores = true;
    let run = |o: &ForwardOptions| {
        batch_gradients(&model, &data, o, 0.01, MseReduction::PerElement, &mut Rng::new(0)).unwrap()
    };
    let (a, b) = (run(&oracle_tracked), run(&injected));
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.grads, b.grads);
}

#[test]
fn projections_never_change() {
    let (cfg, spec) = tiny_config(4);
    let model = ToyModel::new(cfg, 41).unwrap();
    let before = model.projections().to_vec();
    let mut tc = TrainConfig::new(ScheduleKind::AdaptFinetune, 41);
    tc.sparse_steps = 3;
    tc.batch_size = 2;
    tc.eval_samples = 4;
    let out = train(&tc, &spec, model).unwrap();
    assert_eq!(out.model.projections(), &before[..]);
}

#[test]
fn bag_of_words_does_not_solve_task() {
    let spec = ToyTaskSpec::new(128);
    let mut rng = Rng::new(77);
    let tr = make_toy_task(&spec, 2000, &mut rng).unwrap();
    let te = make_toy_task(&spec, 1000, &mut rng).unwrap();
    let acc = bag_of_words_baseline(&tr, &te, 300, 2.0);
    assert!(acc <= 0.6, "bag-of-words accuracy {acc}");
}

#[test]
fn divergence_is_reported() {
    let (cfg, spec) = tiny_config(4);
    let mut model = ToyModel::new(cfg, 51).unwrap();
    let nan = model.params()[0].value.map(|_| f64::NAN);
    model.params_mut()[0].value = nan;
    let mut tc = TrainConfig::new(ScheduleKind::DensePretrain, 51);
    tc.dense_steps = 2;
    tc.batch_size = 1;
    let err = train(&tc, &spec, model).unwrap_err();
    assert!(matches!(err, crate::Error::Divergence { step: 0, .. }));
}
