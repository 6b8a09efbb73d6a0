//! Analytic MAC and energy accounting for one transformer layer.
//!
//! Conventions:
//! - attention MACs are `l²(d_k + d_v)` per head; DSA keeps
//!   `⌈(1 − sparsity)·l⌉` entries per row, so the kept fraction is exactly
//!   the one the mask generators produce;
//! - the predictor of each head costs `l·d·k` for `X·P`, `2·l·k²` for the two
//!   `k × k` transforms and `l²·k` for `S̃`; `X·P` is shared by both transforms
//!   and, with `share_projection`, by all heads of the layer;
//! - prediction MACs are weighted by `β = pred_bits / 32` unless overridden;
//! - at sparsity 0 the layer runs dense attention and carries no predictor.
//!
//! Sparsity here is `1 − kept fraction`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{param_err, Result};
use crate::maskgen::keep_per_row;

/// Shape of one attention layer plus its predictor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LayerShape {
    pub l: usize,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub h: usize,
    pub ffn: usize,
    /// Projection width per head.
    pub k: usize,
    pub pred_bits: u32,
    /// Count `X·P` once per layer instead of once per head.
    #[cfg_attr(feature = "serde", serde(default))]
    pub share_projection: bool,
    /// Overrides `pred_bits / 32`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub beta: Option<f64>,
}

impl LayerShape {
    /// Standard multi-head layout: `d_k = d_v = d/h`, `k = round(σ·d_k)`.
    pub fn with_sigma(l: usize, d: usize, h: usize, ffn: usize, sigma: f64, pred_bits: u32) -> Self {
        let d_k = d / h;
        LayerShape {
            l,
            d,
            d_k,
            d_v: d_k,
            h,
            ffn,
            k: libm::round(sigma * d_k as f64) as usize,
            pred_bits,
            share_projection: false,
            beta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.l, self.d, self.d_k, self.d_v, self.h, self.ffn];
        if dims.contains(&0) || self.pred_bits == 0 {
            return Err(param_err("LayerShape", "dimensions must be positive"));
        }
        if self.k > self.d {
            return Err(param_err("LayerShape", "projection width k exceeds d"));
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(param_err("LayerShape", "beta must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(self.pred_bits as f64 / 32.0)
    }

    /// `σ = k / d_k`
    pub fn sigma(&self) -> f64 {
        self.k as f64 / self.d_k as f64
    }
}

/// Built-in layer configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Preset {
    /// Byte-level text classification at its training length of 2000.
    Text,
    /// The text model at length 4000.
    Text4k,
    /// Document retrieval, length 4000.
    Retrieval,
    /// Pixel-sequence image classification, length 1024.
    Image,
    /// Small configuration used by the toy experiments.
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Text,
        Preset::Text4k,
        Preset::Retrieval,
        Preset::Image,
        Preset::Desk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Text => "text",
            Preset::Text4k => "text-4k",
            Preset::Retrieval => "retrieval",
            Preset::Image => "image",
            Preset::Desk => "desk",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Number of attention layers in the full model.
    pub fn layers(self) -> usize {
        match self {
            Preset::Image => 1,
            Preset::Desk => 2,
            _ => 4,
        }
    }

    /// Layer shape with `σ = 0.25` and 4-bit prediction.
    pub fn shape(self) -> LayerShape {
        match self {
            Preset::Text => LayerShape::with_sigma(2000, 256, 4, 1024, 0.25, 4),
            Preset::Text4k => LayerShape::with_sigma(4000, 256, 4, 1024, 0.25, 4),
            Preset::Retrieval => LayerShape::with_sigma(4000, 128, 4, 512, 0.25, 4),
            Preset::Image => LayerShape::with_sigma(1024, 64, 8, 128, 0.25, 4),
            Preset::Desk => LayerShape::with_sigma(128, 64, 2, 128, 0.25, 4),
        }
    }
}

/// `h·l²·(d_k + d_v)`
pub fn dense_attention_macs(s: &LayerShape) -> u64 {
    attention_macs_for_keep(s, s.l)
}

/// Attention MACs when every row keeps `keep` entries.
pub fn attention_macs_for_keep(s: &LayerShape, keep: usize) -> u64 {
    (s.h * s.l * keep * (s.d_k + s.d_v)) as u64
}

/// Attention MACs under DSA at the given sparsity.
pub fn dsa_attention_macs(s: &LayerShape, sparsity: f64) -> Result<u64> {
    check_sparsity(sparsity)?;
    Ok(attention_macs_for_keep(s, keep_per_row(s.l, sparsity)))
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(param_err(
            "costmodel",
            alloc::format!("sparsity {sparsity} outside [0, 1)"),
        ));
    }
    Ok(())
}

/// Prediction-path MACs of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictionMacs {
    pub raw: u64,
    pub beta: f64,
    pub weighted: f64,
}

pub fn prediction_macs(s: &LayerShape) -> PredictionMacs {
    let (l, d, k, h) = (s.l as u64, s.d as u64, s.k as u64, s.h as u64);
    let projection = if s.share_projection { l * d * k } else { h * l * d * k };
    let per_head = 2 * l * k * k + l * l * k;
    let raw = projection + h * per_head;
    let beta = s.beta();
    PredictionMacs {
        raw,
        beta,
        weighted: beta * raw as f64,
    }
}

/// `Q/K/V` projections plus the output projection.
pub fn linear_macs(s: &LayerShape) -> u64 {
    let (l, d, h) = (s.l as u64, s.d as u64, s.h as u64);
    let qkv = l * d * (2 * s.d_k as u64 + s.d_v as u64) * h;
    let out = l * (s.d_v as u64 * h) * d;
    qkv + out
}

/// Feed-forward GEMMs.
pub fn other_macs(s: &LayerShape) -> u64 {
    2 * (s.l * s.d * s.ffn) as u64
}

/// Per-layer MAC breakdown, dense vs. DSA.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    pub shape: LayerShape,
    pub sparsity: f64,
    pub keep_per_row: usize,
    pub macs_linear: u64,
    pub macs_attention_dense: u64,
    pub macs_attention_dsa: u64,
    pub macs_other: u64,
    pub macs_prediction_raw: u64,
    pub macs_prediction_weighted: f64,
    pub beta: f64,
    pub total_dense: u64,
    /// Full-precision MACs plus β-weighted prediction MACs.
    pub total_dsa: f64,
    /// `total_dense / total_dsa`
    pub reduction_ratio: f64,
    /// β-weighted prediction MACs over `total_dense`.
    pub overhead_ratio: f64,
    /// β-weighted prediction MACs over dense attention MACs.
    pub overhead_vs_attention: f64,
    /// Dense attention MACs over `total_dense`.
    pub attention_share: f64,
}

pub fn layer_breakdown(s: &LayerShape, sparsity: f64) -> Result<CostReport> {
    s.validate()?;
    check_sparsity(sparsity)?;
    let keep = keep_per_row(s.l, sparsity);
    let linear = linear_macs(s);
    let other = other_macs(s);
    let att_dense = dense_attention_macs(s);
    let att_dsa = attention_macs_for_keep(s, keep);
    let pred = if keep < s.l {
        prediction_macs(s)
    } else {
        PredictionMacs {
            raw: 0,
            beta: s.beta(),
            weighted: 0.0,
        }
    };
    let total_dense = linear + att_dense + other;
    let total_dsa = (linear + att_dsa + other) as f64 + pred.weighted;
    Ok(CostReport {
        shape: s.clone(),
        sparsity,
        keep_per_row: keep,
        macs_linear: linear,
        macs_attention_dense: att_dense,
        macs_attention_dsa: att_dsa,
        macs_other: other,
        macs_prediction_raw: pred.raw,
        macs_prediction_weighted: pred.weighted,
        beta: pred.beta,
        total_dense,
        total_dsa,
        reduction_ratio: total_dense as f64 / total_dsa,
        overhead_ratio: pred.weighted / total_dense as f64,
        overhead_vs_attention: pred.weighted / att_dense as f64,
        attention_share: att_dense as f64 / total_dense as f64,
    })
}

/// Relative MAC energy per operand precision (FP32 = 1.0).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EnergyTable {
    /// `(bits, factor)` pairs.
    pub factors: Vec<(u32, f64)>,
    /// Where the numbers came from.
    pub note: String,
}

impl EnergyTable {
    /// Placeholder factors proportional to bit width. Not measured data;
    /// supply a real table for energy claims.
    pub fn placeholder() -> Self {
        EnergyTable {
            factors: alloc::vec![(32, 1.0), (16, 0.5), (8, 0.25), (4, 0.125), (2, 0.0625)],
            note: String::from("placeholder: factor = bits / 32, not measured"),
        }
    }

    pub fn factor(&self, bits: u32) -> Option<f64> {
        self.factors.iter().find(|(b, _)| *b == bits).map(|&(_, f)| f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.iter().any(|&(_, f)| !(f >= 0.0 && f.is_finite())) {
            return Err(param_err("EnergyTable", "factors must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnergyEstimate {
    pub dense: f64,
    pub dsa: f64,
    /// `dsa / dense`
    pub relative: f64,
    /// `dense / dsa`
    pub reduction: f64,
}

/// Σ MACs × factor, with the model at 32 bits and the predictor at
/// `pred_bits`. Prediction MACs enter unweighted; the table carries the
/// precision cost.
pub fn energy_estimate(report: &CostReport, table: &EnergyTable) -> Result<EnergyEstimate> {
    table.validate()?;
    let fp = table
        .factor(32)
        .ok_or_else(|| param_err("energy_estimate", "table lacks a 32-bit factor"))?;
    let pred_factor = if report.macs_prediction_raw == 0 {
        0.0
    } else {
        table.factor(report.shape.pred_bits).ok_or_else(|| {
            param_err(
                "energy_estimate",
                alloc::format!("table lacks a {}-bit factor", report.shape.pred_bits),
            )
        })?
    };
    let dense = report.total_dense as f64 * fp;
    let dsa = (report.macs_linear + report.macs_attention_dsa + report.macs_other) as f64 * fp
        + report.macs_prediction_raw as f64 * pred_factor;
    Ok(EnergyEstimate {
        dense,
        dsa,
        relative: dsa / dense,
        reduction: dense / dsa,
    })
}

/// Element-operation reduction of the sparse softmax: `l² / nnz`.
pub fn sparse_softmax_saving(l: usize, sparsity: f64) -> Result<f64> {
    check_sparsity(sparsity)?;
    Ok(l as f64 / keep_per_row(l, sparsity) as f64)
}
