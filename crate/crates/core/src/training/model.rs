//! Small pre-norm transformer classifier with a prediction path per head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::autodiff::{Tape, Var};
use crate::error::{param_err, shape_err, Result};
use crate::linalg::{Matrix, Precision, Rng};
use crate::maskgen::{
    keep_per_row, local_window_mask, oracle_topk_mask, predicted_topk_mask, prediction_accuracy,
    random_mask, threshold_mask, SparseMask,
};
use crate::predictor::{init_projection, relative_error, ProjectionMatrix, QuantBits, QuantSpec};

/// Shape of a [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub classes: usize,
    /// Projection ratio; each head predicts with `k = round(sigma · d_k)`.
    pub sigma: f64,
    pub pred_bits: u32,
    /// One projection per layer instead of one per head.
    #[cfg_attr(feature = "serde", serde(default))]
    pub share_projection: bool,
    /// Divide scores by `√d_k`.
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub scale: bool,
}

#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d / self.heads
    }

    pub fn k(&self) -> usize {
        (libm::round(self.sigma * self.d_k() as f64) as usize).clamp(1, self.d)
    }

    pub fn quant(&self) -> QuantSpec {
        QuantSpec::new(QuantBits::from_bits(self.pred_bits).unwrap_or(QuantBits::Full))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn", self.ffn),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(param_err("model_config", format!("{name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(param_err(
                "model_config",
                format!("d={} not divisible by heads={}", self.d, self.heads),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(param_err("model_config", format!("sigma={} not in (0, 1]", self.sigma)));
        }
        if QuantBits::from_bits(self.pred_bits).is_none() {
            return Err(param_err(
                "model_config",
                format!("pred_bits={} not in {{2, 4, 8, 16, 32}}", self.pred_bits),
            ));
        }
        Ok(())
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Model,
    Predictor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub group: ParamGroup,
}

#[derive(Debug, Clone)]
struct HeadIds {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    pred_q: usize,
    pred_k: usize,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (usize, usize),
    heads: Vec<HeadIds>,
    w_o: usize,
    ln2: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct ModelIds {
    embed: usize,
    pos: usize,
    layers: Vec<LayerIds>,
    ln_f: (usize, usize),
    w_c: usize,
    b_c: usize,
}

/// How masks are chosen in a sparse forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskPolicy {
    /// Top-k over the predictor's approximate scores.
    Predicted,
    /// Top-k over the exact scores.
    Oracle,
    /// Uniformly random positions, redrawn every pass.
    Random,
    /// Fixed band around the diagonal.
    LocalWindow,
}

/// Attention regime of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    Dense,
    /// Additive top-k masking at the given sparsity.
    Sparse { sparsity: f64, policy: MaskPolicy },
    /// Post-softmax pruning: weights below `theta` are zeroed, no
    /// renormalization.
    Threshold { theta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions {
    pub mode: AttentionMode,
    /// Evaluate the prediction path even when masks do not need it.
    pub track_predictor: bool,
    pub bits_override: Option<QuantBits>,
    /// Select predicted masks from the exact scores instead of `S̃`; the
    /// prediction path still runs and still contributes its loss.
    pub inject_exact_scores: bool,
    /// Record per-head masks and diagnostics.
    pub collect: bool,
    pub mask_constant: f64,
}

impl ForwardOptions {
    pub fn new(mode: AttentionMode) -> Self {
        ForwardOptions {
            mode,
            track_predictor: false,
            bits_override: None,
            inject_exact_scores: false,
            collect: false,
            mask_constant: 1e4,
        }
    }
}

/// Diagnostics for one head of one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub layer: usize,
    pub head: usize,
    /// Mask applied to the scores, if any.
    pub mask: Option<SparseMask>,
    /// Overlap of the applied top-k mask with the oracle mask.
    pub prediction_accuracy: Option<f64>,
    /// `‖S − S̃‖ / ‖S‖`.
    pub relative_error: Option<f64>,
}

/// Handles into the tape for one sample.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub model_loss: Option<Var>,
    /// Per-layer head-averaged `‖S − S̃‖²_F`, summed over layers; `None`
    /// when the prediction path did not run.
    pub mse: Option<Var>,
    pub heads: Vec<HeadRecord>,
}

/// Token classifier used by the training experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    params: Vec<Param>,
    /// Per layer: one projection per head, or a single shared one.
    projections: Vec<Vec<ProjectionMatrix>>,
    precision: Precision,
}

struct Builder {
    params: Vec<Param>,
}

impl Builder {
    fn add(&mut self, name: String, value: Matrix, group: ParamGroup) -> usize {
        self.params.push(Param { name, value, group });
        self.params.len() - 1
    }
}

/// Parameter names and shapes in registration order.
fn layout(c: &ModelConfig) -> Vec<(String, (usize, usize), ParamGroup)> {
    use ParamGroup::*;
    let (d, d_k, k) = (c.d, c.d_k(), c.k());
    let mut out = Vec::new();
    out.push((String::from("embed"), (c.vocab, d), Model));
    out.push((String::from("pos"), (c.seq_len, d), Model));
    for l in 0..c.layers {
        out.push((format!("layer{l}.ln1.gamma"), (1, d), Model));
        out.push((format!("layer{l}.ln1.beta"), (1, d), Model));
        for h in 0..c.heads {
            out.push((format!("layer{l}.head{h}.w_q"), (d, d_k), Model));
            out.push((format!("layer{l}.head{h}.w_k"), (d, d_k), Model));
            out.push((format!("layer{l}.head{h}.w_v"), (d, d_k), Model));
            out.push((format!("layer{l}.head{h}.pred_w_q"), (k, k), Predictor));
            out.push((format!("layer{l}.head{h}.pred_w_k"), (k, k), Predictor));
        }
        out.push((format!("layer{l}.w_o"), (d, d), Model));
        out.push((format!("layer{l}.ln2.gamma"), (1, d), Model));
        out.push((format!("layer{l}.ln2.beta"), (1, d), Model));
        out.push((format!("layer{l}.ffn.w1"), (d, c.ffn), Model));
        out.push((format!("layer{l}.ffn.b1"), (1, c.ffn), Model));
        out.push((format!("layer{l}.ffn.w2"), (c.ffn, d), Model));
        out.push((format!("layer{l}.ffn.b2"), (1, d), Model));
    }
    out.push((String::from("ln_f.gamma"), (1, d), Model));
    out.push((String::from("ln_f.beta"), (1, d), Model));
    out.push((String::from("classifier.w"), (d, c.classes), Model));
    out.push((String::from("classifier.b"), (1, c.classes), Model));
    out
}

fn ids_for(c: &ModelConfig) -> ModelIds {
    // Mirrors the order produced by `layout`.
    let mut next = 0usize;
    let mut take = || {
        next += 1;
        next - 1
    };
    let embed = take();
    let pos = take();
    let mut layers = Vec::with_capacity(c.layers);
    for _ in 0..c.layers {
        let ln1 = (take(), take());
        let heads = (0..c.heads)
            .map(|_| HeadIds {
                w_q: take(),
                w_k: take(),
                w_v: take(),
                pred_q: take(),
                pred_k: take(),
            })
            .collect();
        let w_o = take();
        let ln2 = (take(), take());
        let (w1, b1, w2, b2) = (take(), take(), take(), take());
        layers.push(LayerIds {
            ln1,
            heads,
            w_o,
            ln2,
            w1,
            b1,
            w2,
            b2,
        });
    }
    let ln_f = (take(), take());
    let (w_c, b_c) = (take(), take());
    ModelIds {
        embed,
        pos,
        layers,
        ln_f,
        w_c,
        b_c,
    }
}

impl ToyModel {
    /// Randomly initialized model. Projections are drawn from a stream
    /// separate from the trainable weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, 1);
        let (d, k) = (config.d as f64, config.k() as f64);
        let mut b = Builder { params: Vec::new() };
        for (name, (r, c), group) in layout(&config) {
            let value = if name.ends_with("gamma") {
                Matrix::filled(r, c, 1.0)
            } else if name.ends_with("beta") || name.ends_with(".b") || name.contains(".b1") || name.contains(".b2") {
                Matrix::zeros(r, c)
            } else {
                let std = match name.as_str() {
                    "embed" => 1.0,
                    "pos" => 0.5,
                    _ if group == ParamGroup::Predictor => 1.0 / libm::sqrt(k),
                    _ if name.ends_with("ffn.w2") => 1.0 / libm::sqrt(config.ffn as f64),
                    _ => 1.0 / libm::sqrt(d),
                };
                Matrix::random_normal(r, c, std, &mut rng)
            };
            b.add(name, value, group);
        }
        let mut prng = Rng::stream(seed, 2);
        let per_layer = if config.share_projection { 1 } else { config.heads };
        let mut projections = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut layer = Vec::with_capacity(per_layer);
            for _ in 0..per_layer {
                let s = prng.next_u64();
                layer.push(init_projection(config.d, config.k(), &mut Rng::new(s))?);
            }
            projections.push(layer);
        }
        Ok(ToyModel {
            config,
            params: b.params,
            projections,
            precision: Precision::Standard,
        })
    }

    /// Rebuilds a model from named parameter values, e.g. a checkpoint.
    pub fn from_parts(
        config: ModelConfig,
        values: Vec<(String, Matrix)>,
        projections: Vec<Vec<ProjectionMatrix>>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if values.len() != expected.len() {
            return Err(param_err(
                "from_parts",
                format!("expected {} parameters, got {}", expected.len(), values.len()),
            ));
        }
        let mut params = Vec::with_capacity(values.len());
        for ((name, value), (want, shape, group)) in values.into_iter().zip(expected) {
            if name != want || value.shape() != shape {
                return Err(shape_err(
                    "from_parts",
                    format!("parameter {name} {:?} where {want} {:?} expected", value.shape(), shape),
                ));
            }
            params.push(Param { name, value, group });
        }
        let per_layer = if config.share_projection { 1 } else { config.heads };
        let ok = projections.len() == config.layers
            && projections.iter().all(|l| {
                l.len() == per_layer && l.iter().all(|p| p.d() == config.d && p.k() == config.k())
            });
        if !ok {
            return Err(shape_err("from_parts", "projection layout does not match config"));
        }
        Ok(ToyModel {
            config,
            params,
            projections,
            precision: Precision::Standard,
        })
    }

    /// Same transformer weights with a different prediction path. When the
    /// projection width is unchanged the predictor weights carry over;
    /// otherwise projections and predictor weights are drawn from `seed`.
    pub fn with_predictor(&self, sigma: f64, pred_bits: u32, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.sigma = sigma;
        config.pred_bits = pred_bits;
        config.validate()?;
        if config.k() == self.config.k() {
            return Ok(ToyModel {
                config,
                ..self.clone()
            });
        }
        let fresh = ToyModel::new(config, seed)?;
        let params = self
            .params
            .iter()
            .zip(&fresh.params)
            .map(|(old, new)| match old.group {
                ParamGroup::Model => old.clone(),
                ParamGroup::Predictor => new.clone(),
            })
            .collect();
        Ok(ToyModel {
            params,
            precision: self.precision,
            ..fresh
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn projections(&self) -> &[Vec<ProjectionMatrix>] {
        &self.projections
    }

    pub fn projection(&self, layer: usize, head: usize) -> &ProjectionMatrix {
        let l = &self.projections[layer];
        &l[head.min(l.len() - 1)]
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        for p in &mut self.params {
            p.value = p.value.clone().with_precision(precision);
        }
        self
    }

    /// Records one sample's forward pass on `tape`. `label` adds the
    /// cross-entropy node; `rng` drives random masks.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        label: Option<usize>,
        opts: &ForwardOptions,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        if tokens.len() != c.seq_len {
            return Err(shape_err(
                "forward",
                format!("sequence length {} != {}", tokens.len(), c.seq_len),
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(param_err("forward", format!("token {t} outside vocab {}", c.vocab)));
        }
        let ids = ids_for(c);
        let p = |tape: &mut Tape, id: usize| tape.param(id, &self.params[id].value);
        let l = c.seq_len;
        let scale = if c.scale { 1.0 / libm::sqrt(c.d_k() as f64) } else { 1.0 };
        let quant = opts.bits_override.map(QuantSpec::new).unwrap_or_else(|| c.quant());

        let embed = p(tape, ids.embed);
        let pos = p(tape, ids.pos);
        let tok = tape.gather(embed, tokens);
        let mut x = tape.add(tok, pos);

        let mut mse_layers = Vec::new();
        let mut heads_out = Vec::new();
        for (li, lids) in ids.layers.iter().enumerate() {
            let (g1, b1) = (p(tape, lids.ln1.0), p(tape, lids.ln1.1));
            let xn = tape.layer_norm(x, g1, b1, 1e-5);
            // Only row 0 reaches the classifier, so a dense final layer
            // computes queries and everything downstream for that row alone.
            let readout_only = li + 1 == c.layers && opts.mode == AttentionMode::Dense && !opts.track_predictor;
            let xq = if readout_only { tape.select_row(xn, 0) } else { xn };
            let mut shared_xp = None;
            let mut zs = Vec::with_capacity(c.heads);
            let mut mse_heads = Vec::new();
            for (hi, h) in lids.heads.iter().enumerate() {
                let (wq, wk, wv) = (p(tape, h.w_q), p(tape, h.w_k), p(tape, h.w_v));
                let q = tape.matmul(xq, wq);
                let k = tape.matmul(xn, wk);
                let v = tape.matmul(xn, wv);
                let mut s = tape.matmul_nt(q, k);
                if c.scale {
                    s = tape.scale(s, scale);
                }

                let needs_predictor = opts.track_predictor
                    || matches!(opts.mode, AttentionMode::Sparse { policy: MaskPolicy::Predicted, .. });
                let mut approx = None;
                if needs_predictor {
                    let xp = match (c.share_projection, shared_xp) {
                        (true, Some(xp)) => xp,
                        _ => {
                            let pm = tape.constant(self.projection(li, hi).matrix().clone());
                            let xp = tape.matmul(xn, pm);
                            if c.share_projection {
                                shared_xp = Some(xp);
                            }
                            xp
                        }
                    };
                    let (pq, pk) = (p(tape, h.pred_q), p(tape, h.pred_k));
                    let qt = tape.matmul(xp, pq);
                    let qt = tape.quantize(qt, quant);
                    let kt = tape.matmul(xp, pk);
                    let kt = tape.quantize(kt, quant);
                    let st = tape.matmul_nt(qt, kt);
                    mse_heads.push((tape.squared_error(s, st), 1.0 / c.heads as f64));
                    approx = Some(st);
                }

                let mut record = HeadRecord {
                    layer: li,
                    head: hi,
                    mask: None,
                    prediction_accuracy: None,
                    relative_error: None,
                };
                if opts.collect {
                    if let Some(st) = approx {
                        record.relative_error = Some(relative_error(tape.value(s), tape.value(st))?);
                    }
                }

                let a = match opts.mode {
                    AttentionMode::Dense => tape.softmax(s),
                    AttentionMode::Sparse { sparsity, policy } => {
                        let keep = keep_per_row(l, sparsity);
                        let mask = match policy {
                            MaskPolicy::Predicted => {
                                let src = if opts.inject_exact_scores { s } else { approx.unwrap() };
                                predicted_topk_mask(tape.value(src), keep)?
                            }
                            MaskPolicy::Oracle => oracle_topk_mask(tape.value(s), keep)?,
                            MaskPolicy::Random => random_mask(l, keep, rng)?,
                            MaskPolicy::LocalWindow => local_window_mask(l, keep)?,
                        };
                        if opts.collect {
                            let oracle = oracle_topk_mask(tape.value(s), keep)?;
                            record.prediction_accuracy = Some(prediction_accuracy(&mask, &oracle)?);
                        }
                        let masked = tape.additive_mask(s, &mask, opts.mask_constant);
                        if opts.collect {
                            record.mask = Some(mask);
                        }
                        tape.softmax(masked)
                    }
                    AttentionMode::Threshold { theta } => {
                        let mask = threshold_mask(tape.value(s), theta, true)?;
                        let a = tape.softmax(s);
                        let a = tape.zero_outside(a, &mask);
                        if opts.collect {
                            record.mask = Some(mask);
                        }
                        a
                    }
                };
                if opts.collect {
                    heads_out.push(record);
                }
                zs.push(tape.matmul(a, v));
            }
            if !mse_heads.is_empty() {
                mse_layers.push((tape.weighted_sum(&mse_heads), 1.0));
            }
            let z = tape.concat_cols(&zs);
            let wo = p(tape, lids.w_o);
            let attn = tape.matmul(z, wo);
            let resid = if readout_only { tape.select_row(x, 0) } else { x };
            x = tape.add(resid, attn);

            let (g2, b2) = (p(tape, lids.ln2.0), p(tape, lids.ln2.1));
            let xn2 = tape.layer_norm(x, g2, b2, 1e-5);
            let (w1, bb1, w2, bb2) = (p(tape, lids.w1), p(tape, lids.b1), p(tape, lids.w2), p(tape, lids.b2));
            let h1 = tape.matmul(xn2, w1);
            let h1 = tape.add_row(h1, bb1);
            let h1 = tape.relu(h1);
            let f = tape.matmul(h1, w2);
            let f = tape.add_row(f, bb2);
            x = tape.add(x, f);
        }
        let (gf, bf) = (p(tape, ids.ln_f.0), p(tape, ids.ln_f.1));
        let xf = tape.layer_norm(x, gf, bf, 1e-5);
        let r = tape.select_row(xf, 0);
        let (wc, bc) = (p(tape, ids.w_c), p(tape, ids.b_c));
        let logits = tape.matmul(r, wc);
        let logits = tape.add_row(logits, bc);
        let model_loss = label.map(|y| tape.cross_entropy(logits, &[y]));
        let mse = if mse_layers.is_empty() {
            None
        } else {
            Some(tape.weighted_sum(&mse_layers))
        };
        Ok(ForwardPass {
            logits,
            model_loss,
            mse,
            heads: heads_out,
        })
    }
}

/// Literal batch reconstruction loss: `(1/B)·Σ ‖S − S̃‖²_F` over all pairs.
pub fn mse_loss(exact: &[Matrix], approx: &[Matrix], batch: usize) -> Result<f64> {
    if exact.len() != approx.len() {
        return Err(shape_err(
            "mse_loss",
            format!("{} exact vs {} approximate matrices", exact.len(), approx.len()),
        ));
    }
    if batch == 0 {
        return Err(param_err("mse_loss", "batch size must be positive"));
    }
    let mut total = 0.0;
    for (s, st) in exact.iter().zip(approx) {
        let diff = s.sub(st)?;
        total += diff.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / batch as f64)
}
