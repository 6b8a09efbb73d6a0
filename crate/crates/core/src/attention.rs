//! Reference dense attention and additive-mask attention.

use alloc::vec::Vec;

use crate::error::{param_err, shape_err, Result};
use crate::linalg::{Matrix, Rng};
use crate::maskgen::SparseMask;

/// Projection weights of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `d × d_k`
    pub w_q: Matrix,
    /// `d × d_k`
    pub w_k: Matrix,
    /// `d × d_v`
    pub w_v: Matrix,
}

impl HeadParams {
    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols()
    }

    fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        if self.w_k.rows() != d || self.w_v.rows() != d || self.w_k.cols() != self.w_q.cols() {
            return Err(shape_err("HeadParams", "inconsistent projection shapes"));
        }
        Ok(())
    }
}

/// Multi-head attention weights. Heads run independently and their outputs
/// are concatenated along the feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// Divide scores by `√d_k`.
    pub scale: bool,
}

impl AttentionParams {
    pub fn new(heads: Vec<HeadParams>, scale: bool) -> Result<Self> {
        if heads.is_empty() {
            return Err(param_err("AttentionParams", "need at least one head"));
        }
        let d = heads[0].d();
        for h in &heads {
            h.validate()?;
            if h.d() != d {
                return Err(shape_err("AttentionParams", "heads disagree on d"));
            }
        }
        Ok(AttentionParams { heads, scale })
    }

    /// Gaussian init with std `1/√d`.
    pub fn random(d: usize, d_k: usize, d_v: usize, h: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / libm::sqrt(d as f64);
        let heads = (0..h)
            .map(|_| HeadParams {
                w_q: Matrix::random_normal(d, d_k, std, rng),
                w_k: Matrix::random_normal(d, d_k, std, rng),
                w_v: Matrix::random_normal(d, d_v, std, rng),
            })
            .collect();
        AttentionParams { heads, scale: true }
    }

    pub fn d(&self) -> usize {
        self.heads[0].d()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

/// Large constant subtracted from masked-out scores.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskConstant(f64);

impl MaskConstant {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(param_err("MaskConstant", "c must be positive and finite"));
        }
        Ok(MaskConstant(c))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for MaskConstant {
    fn default() -> Self {
        MaskConstant(1e4)
    }
}

/// `(X·W_Q, X·W_K, X·W_V)` for one head.
pub fn project_qkv(x: &Matrix, head: &HeadParams) -> Result<(Matrix, Matrix, Matrix)> {
    if x.cols() != head.d() {
        return Err(shape_err(
            "project_qkv",
            alloc::format!("X has {} features, weights expect {}", x.cols(), head.d()),
        ));
    }
    Ok((x.matmul(&head.w_q)?, x.matmul(&head.w_k)?, x.matmul(&head.w_v)?))
}

/// `QKᵀ`, divided by `√d_k` when `scale` is set.
pub fn attention_scores(q: &Matrix, k: &Matrix, scale: bool) -> Result<Matrix> {
    let s = q.matmul_nt(k)?;
    Ok(if scale {
        s.scale(1.0 / libm::sqrt(q.cols() as f64))
    } else {
        s
    })
}

/// Subtracts `c` from every score outside the mask. Kept scores are left
/// untouched, so an all-ones mask is an exact no-op.
pub fn apply_additive_mask(scores: &Matrix, mask: &SparseMask, c: MaskConstant) -> Result<Matrix> {
    if scores.rows() != mask.l() || scores.cols() != mask.l() {
        return Err(shape_err(
            "apply_additive_mask",
            alloc::format!("{}x{} scores with l={}", scores.rows(), scores.cols(), mask.l()),
        ));
    }
    let mut out = scores.clone();
    for i in 0..mask.l() {
        let kept = mask.row(i);
        let mut next = kept.iter().peekable();
        for j in 0..mask.l() {
            if next.peek() == Some(&&j) {
                next.next();
            } else {
                out.set(i, j, scores.get(i, j) - c.value());
            }
        }
    }
    Ok(out)
}

/// Attention weights `A` of a single head, optionally under an additive mask.
pub fn head_attention_weights(
    x: &Matrix,
    head: &HeadParams,
    scale: bool,
    mask: Option<(&SparseMask, MaskConstant)>,
) -> Result<Matrix> {
    let (q, k, _) = project_qkv(x, head)?;
    let s = attention_scores(&q, &k, scale)?;
    let s = match mask {
        Some((m, c)) => apply_additive_mask(&s, m, c)?,
        None => s,
    };
    Ok(s.row_softmax())
}

fn head_output(
    x: &Matrix,
    head: &HeadParams,
    scale: bool,
    mask: Option<(&SparseMask, MaskConstant)>,
) -> Result<Matrix> {
    let (q, k, v) = project_qkv(x, head)?;
    let s = attention_scores(&q, &k, scale)?;
    let s = match mask {
        Some((m, c)) => apply_additive_mask(&s, m, c)?,
        None => s,
    };
    s.row_softmax().matmul(&v)
}

/// `softmax(QKᵀ/√d_k)·V` per head, heads concatenated.
pub fn dense_attention(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    let outs = p
        .heads
        .iter()
        .map(|h| head_output(x, h, p.scale, None))
        .collect::<Result<Vec<_>>>()?;
    Matrix::concat_cols(&outs)
}

/// Additive-mask attention with one mask shared by every head.
pub fn masked_attention(
    x: &Matrix,
    p: &AttentionParams,
    mask: &SparseMask,
    c: MaskConstant,
) -> Result<Matrix> {
    let outs = p
        .heads
        .iter()
        .map(|h| head_output(x, h, p.scale, Some((mask, c))))
        .collect::<Result<Vec<_>>>()?;
    Matrix::concat_cols(&outs)
}

/// Additive-mask attention with a separate mask per head.
pub fn masked_attention_per_head(
    x: &Matrix,
    p: &AttentionParams,
    masks: &[SparseMask],
    c: MaskConstant,
) -> Result<Matrix> {
    if masks.len() != p.num_heads() {
        return Err(shape_err(
            "masked_attention_per_head",
            alloc::format!("{} masks for {} heads", masks.len(), p.num_heads()),
        ));
    }
    let outs = p
        .heads
        .iter()
        .zip(masks)
        .map(|(h, m)| head_output(x, h, p.scale, Some((m, c))))
        .collect::<Result<Vec<_>>>()?;
    Matrix::concat_cols(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Precision;
    use alloc::vec;

    fn params(d: usize, dk: usize, h: usize, seed: u64) -> AttentionParams {
        AttentionParams::random(d, dk, dk, h, &mut Rng::new(seed))
    }

    #[test]
    fn identity_and_zero_inputs() {
        let p = params(4, 4, 1, 1);
        let (q, k, v) = project_qkv(&Matrix::identity(4), &p.heads[0]).unwrap();
        assert_eq!(q, p.heads[0].w_q);
        assert_eq!(k, p.heads[0].w_k);
        assert_eq!(v, p.heads[0].w_v);
        let (q, _, _) = project_qkv(&Matrix::zeros(3, 4), &p.heads[0]).unwrap();
        assert_eq!(q.max_abs(), 0.0);
        assert!(project_qkv(&Matrix::zeros(3, 5), &p.heads[0]).is_err());
    }

    #[test]
    fn single_token_returns_values() {
        let p = params(6, 3, 1, 2);
        let x = Matrix::random_normal(1, 6, 1.0, &mut Rng::new(3));
        let z = dense_attention(&x, &p).unwrap();
        let (_, _, v) = project_qkv(&x, &p.heads[0]).unwrap();
        for (a, b) in z.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let p = params(4, 2, 2, 4);
        let row = [0.3, -1.0, 2.0, 0.5];
        let x = Matrix::from_rows(&[row, row, row]).unwrap();
        let z = dense_attention(&x, &p).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(z.row(1), z.row(2));
    }

    #[test]
    fn all_ones_mask_is_exact() {
        let p = params(8, 4, 2, 5);
        let x = Matrix::random_normal(6, 8, 1.0, &mut Rng::new(6));
        let dense = dense_attention(&x, &p).unwrap();
        let masked = masked_attention(&x, &p, &SparseMask::full(6), MaskConstant::default()).unwrap();
        assert_eq!(dense, masked);
    }

    #[test]
    fn diagonal_mask_returns_values() {
        let p = params(8, 4, 1, 7);
        let x = Matrix::random_normal(5, 8, 1.0, &mut Rng::new(8)).with_precision(Precision::High);
        let a = head_attention_weights(
            &x,
            &p.heads[0],
            true,
            Some((&SparseMask::diagonal(5), MaskConstant::default())),
        )
        .unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((a.get(i, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_positions_vanish() {
        let p = params(8, 4, 1, 9);
        let mut rng = Rng::new(10);
        let x = Matrix::random_normal(12, 8, 1.0, &mut rng);
        let mask = crate::maskgen::random_mask(12, 6, &mut rng).unwrap();
        let a = head_attention_weights(&x, &p.heads[0], true, Some((&mask, MaskConstant::default())))
            .unwrap();
        for i in 0..12 {
            let total: f64 = a.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            for j in 0..12 {
                if !mask.contains(i, j) {
                    assert!(a.get(i, j) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = params(4, 2, 2, 11);
        let x = Matrix::zeros(3, 4);
        assert!(masked_attention(&x, &p, &SparseMask::full(4), MaskConstant::default()).is_err());
        assert!(masked_attention_per_head(&x, &p, &[SparseMask::full(3)], MaskConstant::default()).is_err());
        assert!(MaskConstant::new(0.0).is_err());
        assert!(AttentionParams::new(vec![], true).is_err());
    }
}
