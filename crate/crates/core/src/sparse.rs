//! Sparse execution of masked attention: SDDMM for the kept scores, a
//! softmax over stored entries only, and SpMM against `V`.
//!
//! Every kernel reports exact operation counts through [`OpCounter`]; the
//! cost model is checked against these counts rather than against timings.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{project_qkv, AttentionParams};
use crate::error::{shape_err, Result};
use crate::linalg::{dot, Matrix, Precision};
use crate::maskgen::SparseMask;

/// Operation tallies accumulated by the kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OpCounter {
    /// Multiplies performed by SDDMM (`nnz · d_k`).
    pub sddmm_macs: u64,
    /// Exponentials evaluated by the sparse softmax (`nnz`).
    pub softmax_exps: u64,
    /// Multiplies performed by SpMM (`nnz · d_v`).
    pub spmm_macs: u64,
}

impl OpCounter {
    pub fn attention_macs(&self) -> u64 {
        self.sddmm_macs + self.spmm_macs
    }
}

impl core::ops::AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.sddmm_macs += rhs.sddmm_macs;
        self.softmax_exps += rhs.softmax_exps;
        self.spmm_macs += rhs.spmm_macs;
    }
}

/// Scores at the kept positions of a mask, laid out like
/// [`SparseMask::col_indices`].
#[derive(Clone, Debug, PartialEq)]
pub struct SparseScores {
    pub mask: SparseMask,
    pub values: Vec<f64>,
}

impl SparseScores {
    pub fn row_values(&self, i: usize) -> &[f64] {
        let ptr = self.mask.row_ptr();
        &self.values[ptr[i]..ptr[i + 1]]
    }
}

/// Normalized weights at the kept positions. Empty rows carry no weight and
/// are flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseWeights {
    pub mask: SparseMask,
    pub values: Vec<f64>,
    pub empty_rows: Vec<bool>,
}

impl SparseWeights {
    pub fn row_values(&self, i: usize) -> &[f64] {
        let ptr = self.mask.row_ptr();
        &self.values[ptr[i]..ptr[i + 1]]
    }

    /// Dense `l × l` weights with zeros off the mask.
    pub fn to_dense(&self) -> Matrix {
        let l = self.mask.l();
        let mut out = vec![0.0; l * l];
        for i in 0..l {
            for (&j, &v) in self.mask.row(i).iter().zip(self.row_values(i)) {
                out[i * l + j] = v;
            }
        }
        Matrix::from_vec_with(l, l, out, Precision::High).unwrap()
    }
}

/// `⟨Q_i, K_j⟩` (divided by `√d_k` if `scale`) at every kept `(i, j)`.
pub fn sddmm(
    q: &Matrix,
    k: &Matrix,
    mask: &SparseMask,
    scale: bool,
    counter: &mut OpCounter,
) -> Result<SparseScores> {
    if q.cols() != k.cols() {
        return Err(shape_err("sddmm", "Q and K widths differ"));
    }
    if q.rows() != mask.l() || k.rows() != mask.l() {
        return Err(shape_err(
            "sddmm",
            alloc::format!("Q {}x_, K {}x_, mask l={}", q.rows(), k.rows(), mask.l()),
        ));
    }
    let factor = if scale {
        1.0 / libm::sqrt(q.cols() as f64)
    } else {
        1.0
    };
    let precision = q.precision().promote(k.precision());
    let mut values = Vec::with_capacity(mask.nnz());
    for i in 0..mask.l() {
        let qi = q.row(i);
        for &j in mask.row(i) {
            let s = dot(qi, k.row(j));
            values.push(precision.round(if scale { precision.round(s) * factor } else { s }));
        }
    }
    counter.sddmm_macs += (mask.nnz() * q.cols()) as u64;
    Ok(SparseScores {
        mask: mask.clone(),
        values,
    })
}

/// Row softmax over stored entries, with max subtraction. Rows without
/// entries produce no weights and set their empty flag.
pub fn sparse_softmax(s: &SparseScores, counter: &mut OpCounter) -> SparseWeights {
    let l = s.mask.l();
    let mut values = Vec::with_capacity(s.values.len());
    let mut empty_rows = vec![false; l];
    for (i, empty) in empty_rows.iter_mut().enumerate() {
        let row = s.row_values(i);
        if row.is_empty() {
            *empty = true;
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = values.len();
        let mut sum = 0.0;
        for &v in row {
            let e = libm::exp(v - max);
            sum += e;
            values.push(e);
        }
        for v in &mut values[start..] {
            *v /= sum;
        }
        counter.softmax_exps += row.len() as u64;
    }
    SparseWeights {
        mask: s.mask.clone(),
        values,
        empty_rows,
    }
}

/// `Z_i = Σ_{j ∈ kept(i)} a_ij · V_j`; empty rows give zero output rows.
pub fn spmm(a: &SparseWeights, v: &Matrix, counter: &mut OpCounter) -> Result<Matrix> {
    let l = a.mask.l();
    if v.rows() != l {
        return Err(shape_err(
            "spmm",
            alloc::format!("weights l={l}, V has {} rows", v.rows()),
        ));
    }
    let dv = v.cols();
    let mut out = vec![0.0; l * dv];
    for i in 0..l {
        let acc = &mut out[i * dv..(i + 1) * dv];
        for (&j, &w) in a.mask.row(i).iter().zip(a.row_values(i)) {
            for (o, &x) in acc.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    counter.spmm_macs += (a.mask.nnz() * dv) as u64;
    Matrix::from_vec_with(l, dv, out, v.precision())
}

/// One head through SDDMM → sparse softmax → SpMM.
pub fn sparse_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &SparseMask,
    scale: bool,
    counter: &mut OpCounter,
) -> Result<Matrix> {
    let scores = sddmm(q, k, mask, scale, counter)?;
    let weights = sparse_softmax(&scores, counter);
    spmm(&weights, v, counter)
}

/// Multi-head sparse attention with one mask per head; head outputs are
/// concatenated in head order.
pub fn sparse_attention(
    x: &Matrix,
    p: &AttentionParams,
    masks: &[SparseMask],
) -> Result<(Matrix, OpCounter)> {
    if masks.len() != p.num_heads() {
        return Err(shape_err(
            "sparse_attention",
            alloc::format!("{} masks for {} heads", masks.len(), p.num_heads()),
        ));
    }
    let mut counter = OpCounter::default();
    let mut outs = Vec::with_capacity(masks.len());
    for (head, mask) in p.heads.iter().zip(masks) {
        let (q, k, v) = project_qkv(x, head)?;
        outs.push(sparse_head_attention(&q, &k, &v, mask, p.scale, &mut counter)?);
    }
    Ok((Matrix::concat_cols(&outs)?, counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_scores, dense_attention, masked_attention, MaskConstant};
    use crate::linalg::Rng;
    use crate::maskgen::random_mask;

    fn qk(l: usize, dk: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = Rng::new(seed);
        (
            Matrix::random_normal(l, dk, 1.0, &mut rng).with_precision(Precision::High),
            Matrix::random_normal(l, dk, 1.0, &mut rng).with_precision(Precision::High),
        )
    }

    #[test]
    fn sddmm_full_diagonal_random() {
        let (q, k) = qk(16, 8, 1);
        let dense = attention_scores(&q, &k, true).unwrap();
        let mut c = OpCounter::default();
        let full = sddmm(&q, &k, &SparseMask::full(16), true, &mut c).unwrap();
        for i in 0..16 {
            for (j, v) in full.row_values(i).iter().enumerate() {
                assert!((v - dense.get(i, j)).abs() < 1e-6);
            }
        }
        let diag = sddmm(&q, &k, &SparseMask::diagonal(16), false, &mut c).unwrap();
        for i in 0..16 {
            assert!((diag.row_values(i)[0] - dot(q.row(i), k.row(i))).abs() < 1e-12);
        }
        let mask = random_mask(16, 2, &mut Rng::new(2)).unwrap();
        let mut c = OpCounter::default();
        let s = sddmm(&q, &k, &mask, true, &mut c).unwrap();
        for i in 0..16 {
            for (&j, v) in mask.row(i).iter().zip(s.row_values(i)) {
                assert!((v - dense.get(i, j)).abs() < 1e-12);
            }
        }
        assert_eq!(c.sddmm_macs, (mask.nnz() * 8) as u64);
    }

    #[test]
    fn softmax_single_entry_and_empty_row() {
        let mask = SparseMask::from_rows(3, vec![vec![1], vec![], vec![0, 2]]).unwrap();
        let s = SparseScores {
            mask,
            values: vec![5.0, 1.0, 1.0],
        };
        let mut c = OpCounter::default();
        let w = sparse_softmax(&s, &mut c);
        assert_eq!(w.row_values(0), &[1.0]);
        assert_eq!(w.empty_rows, vec![false, true, false]);
        assert_eq!(w.row_values(2), &[0.5, 0.5]);
        assert_eq!(c.softmax_exps, 3);
        let z = spmm(&w, &Matrix::filled(3, 2, 1.0), &mut c).unwrap();
        assert_eq!(z.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn full_mask_matches_dense_softmax() {
        let (q, k) = qk(10, 4, 3);
        let dense = attention_scores(&q, &k, true).unwrap().row_softmax();
        let mut c = OpCounter::default();
        let s = sddmm(&q, &k, &SparseMask::full(10), true, &mut c).unwrap();
        let w = sparse_softmax(&s, &mut c).to_dense();
        assert!(dense.sub(&w).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn spmm_matches_densified_product() {
        let (q, k) = qk(20, 6, 4);
        let v = Matrix::random_normal(20, 5, 1.0, &mut Rng::new(5)).with_precision(Precision::High);
        let mask = random_mask(20, 2, &mut Rng::new(6)).unwrap();
        let mut c = OpCounter::default();
        let w = sparse_softmax(&sddmm(&q, &k, &mask, true, &mut c).unwrap(), &mut c);
        let z = spmm(&w, &v, &mut c).unwrap();
        let want = w.to_dense().matmul(&v).unwrap();
        assert!(z.sub(&want).unwrap().max_abs() < 1e-6);
        assert_eq!(c.spmm_macs, (mask.nnz() * 5) as u64);

        let ident = SparseWeights {
            mask: SparseMask::diagonal(20),
            values: vec![1.0; 20],
            empty_rows: vec![false; 20],
        };
        assert_eq!(spmm(&ident, &v, &mut c).unwrap(), v);
    }

    #[test]
    fn end_to_end_against_dense_paths() {
        let mut rng = Rng::new(7);
        let p = AttentionParams::random(8, 4, 4, 2, &mut rng);
        let x = Matrix::random_normal(12, 8, 1.0, &mut rng).with_precision(Precision::High);
        let full = vec![SparseMask::full(12); 2];
        let (z, counter) = sparse_attention(&x, &p, &full).unwrap();
        let dense = dense_attention(&x, &p).unwrap();
        assert!(z.sub(&dense).unwrap().max_abs() < 1e-5);
        assert_eq!(counter.attention_macs(), 2 * 144 * (4 + 4));

        let mask = random_mask(12, 3, &mut rng).unwrap();
        let (z, _) = sparse_attention(&x, &p, &[mask.clone(), mask.clone()]).unwrap();
        let eq4 = masked_attention(&x, &p, &mask, MaskConstant::default()).unwrap();
        assert!(z.sub(&eq4).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn shape_errors() {
        let (q, k) = qk(4, 2, 8);
        let mut c = OpCounter::default();
        assert!(sddmm(&q, &k, &SparseMask::full(5), true, &mut c).is_err());
        assert!(sddmm(&q, &Matrix::zeros(4, 3), &SparseMask::full(4), true, &mut c).is_err());
    }
}
