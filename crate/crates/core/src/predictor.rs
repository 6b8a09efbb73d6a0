//! The prediction path: a frozen sparse random projection followed by a
//! pair of small trainable transforms and a low-precision score product.
//!
//! ```text
//! R  = X·P                 (l × k, computed once)
//! Q̃  = quantize(R·W̃_Q)
//! K̃  = quantize(R·W̃_K)
//! S̃  = Q̃·K̃ᵀ
//! ```
//!
//! `P` has entries in `√(3/k)·{−1, 0, +1}` drawn with probabilities
//! `{1/6, 2/3, 1/6}` and is never updated by training.

use crate::error::{param_err, shape_err, Result};
use crate::linalg::{Matrix, Precision, Rng};

/// Frozen `d × k` sparse projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    p: Matrix,
    seed: u64,
}

impl ProjectionMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d(&self) -> usize {
        self.p.rows()
    }

    pub fn k(&self) -> usize {
        self.p.cols()
    }

    /// `√(3/k)`
    pub fn entry_scale(&self) -> f64 {
        libm::sqrt(3.0 / self.k() as f64)
    }

    /// Wraps an explicit matrix after checking every entry is `0` or
    /// `±√(3/k)`.
    pub fn from_matrix(p: Matrix, seed: u64) -> Result<Self> {
        if p.cols() == 0 || p.cols() > p.rows() {
            return Err(param_err("ProjectionMatrix", "need 1 <= k <= d"));
        }
        let scale = Precision::Standard.round(libm::sqrt(3.0 / p.cols() as f64));
        let ok = p.data().iter().all(|&v| {
            v == 0.0 || (v.abs() - scale).abs() <= 1e-6 * scale
        });
        if !ok {
            return Err(param_err(
                "ProjectionMatrix",
                "entries must lie in sqrt(3/k)·{-1, 0, 1}",
            ));
        }
        Ok(ProjectionMatrix { p, seed })
    }
}

/// Draws a `d × k` projection.
pub fn init_projection(d: usize, k: usize, rng: &mut Rng) -> Result<ProjectionMatrix> {
    if k == 0 || k > d {
        return Err(param_err(
            "init_projection",
            alloc::format!("k={k} must satisfy 1 <= k <= d={d}"),
        ));
    }
    let scale = libm::sqrt(3.0 / k as f64);
    let mut p = Matrix::zeros(d, k);
    for r in 0..d {
        for c in 0..k {
            let u = rng.uniform();
            let v = if u < 1.0 / 6.0 {
                -scale
            } else if u < 5.0 / 6.0 {
                0.0
            } else {
                scale
            };
            p.set(r, c, v);
        }
    }
    Ok(ProjectionMatrix {
        p,
        seed: rng.seed(),
    })
}

/// Bit width of the quantized predictor operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum QuantBits {
    Int2,
    #[default]
    Int4,
    Int8,
    Int16,
    /// No quantization.
    Full,
}

impl QuantBits {
    pub const ALL: [QuantBits; 5] = [
        QuantBits::Full,
        QuantBits::Int16,
        QuantBits::Int8,
        QuantBits::Int4,
        QuantBits::Int2,
    ];

    /// Bits per operand; `Full` counts as 32.
    pub fn bits(self) -> u32 {
        match self {
            QuantBits::Int2 => 2,
            QuantBits::Int4 => 4,
            QuantBits::Int8 => 8,
            QuantBits::Int16 => 16,
            QuantBits::Full => 32,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        Some(match bits {
            2 => QuantBits::Int2,
            4 => QuantBits::Int4,
            8 => QuantBits::Int8,
            16 => QuantBits::Int16,
            32 => QuantBits::Full,
            _ => return None,
        })
    }

    /// Largest representable level, `2^(bits−1) − 1`; `None` for `Full`.
    pub fn max_level(self) -> Option<f64> {
        match self {
            QuantBits::Full => None,
            b => Some(((1u64 << (b.bits() - 1)) - 1) as f64),
        }
    }
}

/// Symmetric, per-tensor uniform quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantSpec {
    pub bits: QuantBits,
}

impl QuantSpec {
    pub fn new(bits: QuantBits) -> Self {
        QuantSpec { bits }
    }

    pub fn full() -> Self {
        QuantSpec {
            bits: QuantBits::Full,
        }
    }

    /// Step size for a tensor; zero for an all-zero tensor or `Full`.
    pub fn scale_for(&self, m: &Matrix) -> f64 {
        match self.bits.max_level() {
            None => 0.0,
            Some(levels) => m.max_abs() / levels,
        }
    }
}

/// Fake-quantizes `m`: `clamp(round(m/s), −L, L)·s` with
/// `s = max|m| / L` and `L = 2^(bits−1) − 1`. Rounds half away from zero.
pub fn quantize(m: &Matrix, q: QuantSpec) -> Matrix {
    let Some(levels) = q.bits.max_level() else {
        return m.clone();
    };
    let s = m.max_abs() / levels;
    if s == 0.0 {
        return m.map(|_| 0.0);
    }
    m.map(|v| libm::round(v / s).clamp(-levels, levels) * s)
}

/// Predictor parameters for one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub projection: ProjectionMatrix,
    /// `k × k`
    pub w_q: Matrix,
    /// `k × k`
    pub w_k: Matrix,
    pub quant: QuantSpec,
}

impl PredictorParams {
    /// Random transforms with std `1/√k` on top of the given projection.
    pub fn random(projection: ProjectionMatrix, quant: QuantSpec, rng: &mut Rng) -> Self {
        let k = projection.k();
        let std = 1.0 / libm::sqrt(k as f64);
        PredictorParams {
            w_q: Matrix::random_normal(k, k, std, rng),
            w_k: Matrix::random_normal(k, k, std, rng),
            projection,
            quant,
        }
    }

    pub fn k(&self) -> usize {
        self.projection.k()
    }

    pub fn d(&self) -> usize {
        self.projection.d()
    }
}

/// Intermediate products of one predictor evaluation.
#[derive(Clone, Debug)]
pub struct PredictorOutput {
    pub xp: Matrix,
    pub q_tilde: Matrix,
    pub k_tilde: Matrix,
    pub scores: Matrix,
}

/// Runs the prediction path and keeps the intermediates.
pub fn predict(x: &Matrix, pp: &PredictorParams) -> Result<PredictorOutput> {
    if x.cols() != pp.d() {
        return Err(shape_err(
            "approx_scores",
            alloc::format!("X has {} features, projection expects {}", x.cols(), pp.d()),
        ));
    }
    if pp.w_q.shape() != (pp.k(), pp.k()) || pp.w_k.shape() != (pp.k(), pp.k()) {
        return Err(shape_err("approx_scores", "W̃ must be k×k"));
    }
    let xp = x.matmul(pp.projection.matrix())?;
    let q_tilde = quantize(&xp.matmul(&pp.w_q)?, pp.quant);
    let k_tilde = quantize(&xp.matmul(&pp.w_k)?, pp.quant);
    let scores = q_tilde.matmul_nt(&k_tilde)?;
    Ok(PredictorOutput {
        xp,
        q_tilde,
        k_tilde,
        scores,
    })
}

/// Approximate score matrix `S̃ = Q̃·K̃ᵀ`.
pub fn approx_scores(x: &Matrix, pp: &PredictorParams) -> Result<Matrix> {
    Ok(predict(x, pp)?.scores)
}

/// `‖S − S̃‖_F / ‖S‖_F`
pub fn relative_error(exact: &Matrix, approx: &Matrix) -> Result<f64> {
    let norm = exact.frobenius_norm();
    let diff = exact.sub(approx)?.frobenius_norm();
    Ok(if norm == 0.0 { diff } else { diff / norm })
}
