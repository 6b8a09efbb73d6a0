//! Optimizer, training schedules and evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::autodiff::{Tape, Var};
use super::model::{AttentionMode, ForwardOptions, MaskPolicy, ParamGroup, ToyModel};
use super::task::{make_toy_task, sample_sequence, ToyDataset, ToyTaskSpec};
use crate::error::{param_err, Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::predictor::QuantBits;

/// Components of the joint objective for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub model_loss: f64,
    pub mse_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(model_loss: f64, mse_loss: f64, lambda: f64) -> Self {
        LossBreakdown {
            model_loss,
            mse_loss,
            lambda,
            total: model_loss + lambda * mse_loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ScheduleKind {
    /// Dense attention only; the prediction path is frozen and idle.
    DensePretrain,
    /// Joint sparse training of model and predictor from the given weights.
    AdaptFinetune,
    /// `dense_steps` of dense pretraining, then `sparse_steps` of adaptation.
    FromScratchTwoPhase,
}

/// Normalization of `‖S − S̃‖²_F` inside the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MseReduction {
    /// Squared Frobenius norm, as written.
    Sum,
    /// Divided by `l²`, so λ does not depend on sequence length.
    #[default]
    PerElement,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub schedule: ScheduleKind,
    pub dense_steps: usize,
    pub sparse_steps: usize,
    pub sparsity: f64,
    pub lr: f64,
    /// Learning rate of the prediction path; defaults to `lr`.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub predictor_lr: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub policy: MaskPolicy,
    #[cfg_attr(feature = "serde", serde(default))]
    pub mse_reduction: MseReduction,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    /// Train only the prediction path.
    #[cfg_attr(feature = "serde", serde(default))]
    pub freeze_model: bool,
}

impl TrainConfig {
    pub fn new(schedule: ScheduleKind, seed: u64) -> Self {
        TrainConfig {
            schedule,
            dense_steps: 300,
            sparse_steps: 150,
            sparsity: 0.9,
            lr: 3e-3,
            predictor_lr: None,
            lambda: 0.01,
            seed,
            batch_size: 16,
            policy: MaskPolicy::Predicted,
            mse_reduction: MseReduction::PerElement,
            eval_every: 0,
            eval_samples: 256,
            clip_norm: 1.0,
            freeze_model: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(param_err("train_config", format!("sparsity {} not in [0, 1)", self.sparsity)));
        }
        for lr in [Some(self.lr), self.predictor_lr].into_iter().flatten() {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(param_err("train_config", "learning rates must be positive"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(param_err("train_config", "lambda must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(param_err("train_config", "batch_size must be positive"));
        }
        Ok(())
    }

    fn phases(&self) -> Vec<Phase> {
        let dense = Phase {
            mode: AttentionMode::Dense,
            steps: self.dense_steps,
            train_predictor: false,
        };
        let sparse = Phase {
            mode: AttentionMode::Sparse {
                sparsity: self.sparsity,
                policy: self.policy,
            },
            steps: self.sparse_steps,
            train_predictor: true,
        };
        match self.schedule {
            ScheduleKind::DensePretrain => vec![dense],
            ScheduleKind::AdaptFinetune => vec![sparse],
            ScheduleKind::FromScratchTwoPhase => vec![dense, sparse],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Phase {
    mode: AttentionMode,
    steps: usize,
    train_predictor: bool,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update with per-parameter learning rates; a rate of zero
    /// leaves the parameter and its moments untouched.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>], lrs: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let (Some(g), true) = (&grads[i], lr > 0.0) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.data().to_vec();
            for (j, (w, gj)) in data.iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= lr * (m[j] / b1t) / (libm::sqrt(v[j] / b2t) + self.eps);
            }
            *p = Matrix::from_vec_with(p.rows(), p.cols(), data, p.precision()).unwrap();
        }
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub phase: usize,
    pub loss: LossBreakdown,
    pub prediction_accuracy: Option<f64>,
    pub relative_error: Option<f64>,
}

/// Held-out evaluation summary.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalMetrics {
    pub step: usize,
    pub accuracy: f64,
    pub model_loss: f64,
    /// Mean of `‖S − S̃‖²` (training normalization) when the predictor ran.
    pub mse_loss: Option<f64>,
    pub prediction_accuracy: Option<f64>,
    pub layer_prediction_accuracy: Vec<f64>,
    pub relative_error: Option<f64>,
    /// Fraction of attention entries not kept, over all heads and rows.
    pub attention_sparsity: f64,
    pub empty_rows: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalMetrics>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> &EvalMetrics {
        self.evals.last().expect("train always evaluates at the end")
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub mode: AttentionMode,
    pub bits_override: Option<QuantBits>,
    pub track_predictor: bool,
    pub mse_reduction: MseReduction,
    pub seed: u64,
}

impl EvalOptions {
    pub fn new(mode: AttentionMode) -> Self {
        EvalOptions {
            mode,
            bits_override: None,
            track_predictor: false,
            mse_reduction: MseReduction::PerElement,
            seed: 0,
        }
    }
}

fn mse_scale(reduction: MseReduction, l: usize) -> f64 {
    match reduction {
        MseReduction::Sum => 1.0,
        MseReduction::PerElement => 1.0 / (l * l) as f64,
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and diagnostics on a fixed dataset.
pub fn evaluate(model: &ToyModel, data: &ToyDataset, opts: &EvalOptions) -> Result<EvalMetrics> {
    let mut fwd = ForwardOptions::new(opts.mode);
    fwd.collect = true;
    fwd.track_predictor = opts.track_predictor;
    fwd.bits_override = opts.bits_override;
    let layers = model.config().layers;
    let l = model.config().seq_len;
    let mut rng = Rng::stream(opts.seed, 7);
    let (mut correct, mut loss, mut mse, mut mse_n) = (0usize, 0.0, 0.0, 0usize);
    let mut acc_sum = vec![0.0; layers];
    let mut acc_n = vec![0usize; layers];
    let (mut rel, mut rel_n) = (0.0, 0usize);
    let (mut kept, mut total, mut empty) = (0usize, 0usize, 0usize);
    for s in &data.samples {
        let mut tape = Tape::new(model.precision());
        let pass = model.forward(&mut tape, &s.tokens, Some(s.label), &fwd, &mut rng)?;
        if argmax(tape.value(pass.logits).row(0)) == s.label {
            correct += 1;
        }
        loss += tape.scalar(pass.model_loss.unwrap());
        if let Some(m) = pass.mse {
            mse += tape.scalar(m) * mse_scale(opts.mse_reduction, l);
            mse_n += 1;
        }
        for h in &pass.heads {
            if let Some(a) = h.prediction_accuracy {
                acc_sum[h.layer] += a;
                acc_n[h.layer] += 1;
            }
            if let Some(e) = h.relative_error {
                rel += e;
                rel_n += 1;
            }
            total += l * l;
            kept += h.mask.as_ref().map_or(l * l, |m| m.nnz());
            empty += h.mask.as_ref().map_or(0, |m| m.empty_rows().len());
        }
    }
    let n = data.len().max(1) as f64;
    let layer_acc: Vec<f64> = acc_sum
        .iter()
        .zip(&acc_n)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let overall = if acc_n.iter().sum::<usize>() > 0 {
        Some(acc_sum.iter().sum::<f64>() / acc_n.iter().sum::<usize>() as f64)
    } else {
        None
    };
    Ok(EvalMetrics {
        step: 0,
        accuracy: correct as f64 / n,
        model_loss: loss / n,
        mse_loss: (mse_n > 0).then(|| mse / mse_n as f64),
        prediction_accuracy: overall,
        layer_prediction_accuracy: layer_acc,
        relative_error: (rel_n > 0).then(|| rel / rel_n as f64),
        attention_sparsity: if total == 0 { 0.0 } else { 1.0 - kept as f64 / total as f64 },
        empty_rows: empty,
    })
}

/// Held-out set used by [`train`] for a given seed.
pub fn eval_dataset(spec: &ToyTaskSpec, samples: usize, seed: u64) -> Result<ToyDataset> {
    make_toy_task(spec, samples, &mut Rng::stream(seed, 11))
}

/// Gradients and loss of one mini-batch.
pub struct BatchGradients {
    pub grads: Vec<Option<Matrix>>,
    pub loss: LossBreakdown,
    pub prediction_accuracy: Option<f64>,
    pub relative_error: Option<f64>,
}

/// Forward and backward over a batch; per-sample gradients are summed in
/// sample order.
pub fn batch_gradients(
    model: &ToyModel,
    batch: &[(Vec<usize>, usize)],
    opts: &ForwardOptions,
    lambda: f64,
    reduction: MseReduction,
    rng: &mut Rng,
) -> Result<BatchGradients> {
    let n_params = model.params().len();
    let l = model.config().seq_len;
    let b = batch.len() as f64;
    let mut grads: Vec<Option<Matrix>> = vec![None; n_params];
    let (mut ce, mut mse) = (0.0, 0.0);
    let (mut acc, mut acc_n, mut rel, mut rel_n) = (0.0, 0usize, 0.0, 0usize);
    for (tokens, label) in batch {
        let mut tape = Tape::new(model.precision());
        let pass = model.forward(&mut tape, tokens, Some(*label), opts, rng)?;
        let ce_var = pass.model_loss.unwrap();
        let mut terms: Vec<(Var, f64)> = vec![(ce_var, 1.0 / b)];
        ce += tape.scalar(ce_var) / b;
        if let Some(m) = pass.mse {
            let w = mse_scale(reduction, l);
            mse += tape.scalar(m) * w / b;
            if lambda > 0.0 {
                terms.push((m, lambda * w / b));
            }
        }
        for h in &pass.heads {
            if let Some(a) = h.prediction_accuracy {
                acc += a;
                acc_n += 1;
            }
            if let Some(e) = h.relative_error {
                rel += e;
                rel_n += 1;
            }
        }
        let total = tape.weighted_sum(&terms);
        for (slot, g) in grads.iter_mut().zip(tape.backward(total, n_params)) {
            if let Some(g) = g {
                *slot = Some(match slot.take() {
                    Some(prev) => prev.add(&g)?,
                    None => g,
                });
            }
        }
    }
    Ok(BatchGradients {
        grads,
        loss: LossBreakdown::new(ce, mse, lambda),
        prediction_accuracy: (acc_n > 0).then(|| acc / acc_n as f64),
        relative_error: (rel_n > 0).then(|| rel / rel_n as f64),
    })
}

fn clip(grads: &mut [Option<Matrix>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = libm::sqrt(
        grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum(),
    );
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }
}

/// Runs the configured schedule on freshly sampled pointer-match batches,
/// starting from `model`. Each step draws a new batch from a seeded stream,
/// so two runs with the same seed see the same data regardless of mask
/// policy.
pub fn train(config: &TrainConfig, task: &ToyTaskSpec, mut model: ToyModel) -> Result<TrainOutcome> {
    config.validate()?;
    task.validate()?;
    if model.config().seq_len != task.seq_len || model.config().vocab != task.vocab() {
        return Err(param_err("train", "model does not match task shape"));
    }
    let eval_set = eval_dataset(task, config.eval_samples, config.seed)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.data().len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut data_rng = Rng::stream(config.seed, 3);
    let mut mask_rng = Rng::stream(config.seed, 5);
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let mut step = 0usize;
    let mut last_mode = AttentionMode::Dense;

    for (pi, phase) in config.phases().into_iter().enumerate() {
        let mut fwd = ForwardOptions::new(phase.mode);
        fwd.collect = true;
        let lrs: Vec<f64> = model
            .params()
            .iter()
            .map(|p| match p.group {
                ParamGroup::Model if config.freeze_model => 0.0,
                ParamGroup::Model => config.lr,
                ParamGroup::Predictor if phase.train_predictor => config.predictor_lr.unwrap_or(config.lr),
                ParamGroup::Predictor => 0.0,
            })
            .collect();
        if config.freeze_model {
            fwd.track_predictor = true;
        }
        last_mode = phase.mode;
        for _ in 0..phase.steps {
            let batch: Vec<(Vec<usize>, usize)> = (0..config.batch_size)
                .map(|_| {
                    let s = sample_sequence(task, &mut data_rng);
                    (s.tokens, s.label)
                })
                .collect();
            let mut bg = batch_gradients(
                &model,
                &batch,
                &fwd,
                config.lambda,
                config.mse_reduction,
                &mut mask_rng,
            )?;
            if !bg.loss.total.is_finite() || bg.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: format!(
                        "loss {} (model {}, mse {})",
                        bg.loss.total, bg.loss.model_loss, bg.loss.mse_loss
                    ),
                });
            }
            clip(&mut bg.grads, config.clip_norm);
            let mut values: Vec<Matrix> = model.params().iter().map(|p| p.value.clone()).collect();
            adam.step(&mut values, &bg.grads, &lrs);
            for (p, v) in model.params_mut().iter_mut().zip(values) {
                p.value = v;
            }
            history.push(StepRecord {
                step,
                phase: pi,
                loss: bg.loss,
                prediction_accuracy: bg.prediction_accuracy,
                relative_error: bg.relative_error,
            });
            step += 1;
            if config.eval_every > 0 && step % config.eval_every == 0 {
                let mut m = evaluate(&model, &eval_set, &eval_opts(config, phase.mode))?;
                m.step = step;
                evals.push(m);
            }
        }
    }
    if evals.last().map(|e| e.step) != Some(step) {
        let mut m = evaluate(&model, &eval_set, &eval_opts(config, last_mode))?;
        m.step = step;
        evals.push(m);
    }
    Ok(TrainOutcome {
        model,
        history,
        evals,
    })
}

fn eval_opts(config: &TrainConfig, mode: AttentionMode) -> EvalOptions {
    let mut o = EvalOptions::new(mode);
    o.mse_reduction = config.mse_reduction;
    o.seed = config.seed;
    o.track_predictor = config.freeze_model;
    o
}
