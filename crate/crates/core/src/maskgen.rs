//! Sparse attention masks and the generators that produce them from exact or
//! approximate scores.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{param_err, shape_err, Result};
use crate::linalg::{topk_row, Matrix, Rng};

/// Per-row sets of kept key positions for an `l × l` attention matrix,
/// stored in compressed-row form. Rows are ascending and duplicate free.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparseMask {
    l: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl SparseMask {
    /// Builds a mask from per-row index lists. Each row is sorted; indices
    /// out of range or repeated within a row are rejected.
    pub fn from_rows(l: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if rows.len() != l {
            return Err(shape_err(
                "SparseMask::from_rows",
                alloc::format!("{} rows for l={l}", rows.len()),
            ));
        }
        let mut row_ptr = Vec::with_capacity(l + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(param_err(
                    "SparseMask::from_rows",
                    alloc::format!("duplicate index in row {i}"),
                ));
            }
            if row.last().is_some_and(|&j| j >= l) {
                return Err(param_err(
                    "SparseMask::from_rows",
                    alloc::format!("index out of range in row {i}"),
                ));
            }
            cols.extend(row);
            row_ptr.push(cols.len());
        }
        Ok(SparseMask { l, row_ptr, cols })
    }

    pub fn full(l: usize) -> Self {
        Self::from_rows(l, (0..l).map(|_| (0..l).collect()).collect()).unwrap()
    }

    pub fn diagonal(l: usize) -> Self {
        Self::from_rows(l, (0..l).map(|i| vec![i]).collect()).unwrap()
    }

    /// Dense 0/1 matrix, `>= 0.5` meaning kept.
    pub fn from_dense(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(shape_err("SparseMask::from_dense", "mask must be square"));
        }
        let rows = (0..m.rows())
            .map(|r| (0..m.cols()).filter(|&c| m.get(r, c) >= 0.5).collect())
            .collect();
        Self::from_rows(m.rows(), rows)
    }

    #[inline]
    pub fn l(&self) -> usize {
        self.l
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.l).map(move |i| self.row(i))
    }

    /// Offsets of each row's entries in the flattened index list.
    #[inline]
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    /// All kept column indices, row by row.
    #[inline]
    pub fn col_indices(&self) -> &[usize] {
        &self.cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// `1 − nnz / l²`.
    pub fn sparsity(&self) -> f64 {
        if self.l == 0 {
            return 0.0;
        }
        1.0 - self.nnz() as f64 / (self.l * self.l) as f64
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.row(i).binary_search(&j).is_ok()
    }

    /// The common per-row count when every row keeps the same number of
    /// entries.
    pub fn balanced_count(&self) -> Option<usize> {
        let first = if self.l == 0 { 0 } else { self.row_count(0) };
        (0..self.l)
            .all(|i| self.row_count(i) == first)
            .then_some(first)
    }

    /// Rows with no kept entry.
    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.l).filter(|&i| self.row_count(i) == 0).collect()
    }

    pub fn has_empty_rows(&self) -> bool {
        (0..self.l).any(|i| self.row_count(i) == 0)
    }

    /// Dense 0/1 form.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.l, self.l);
        for i in 0..self.l {
            for &j in self.row(i) {
                m.set(i, j, 1.0);
            }
        }
        m
    }

    pub fn transpose(&self) -> SparseMask {
        let mut rows = vec![Vec::new(); self.l];
        for i in 0..self.l {
            for &j in self.row(i) {
                rows[j].push(i);
            }
        }
        SparseMask::from_rows(self.l, rows).unwrap()
    }

    /// Set intersection size with another mask of the same length.
    pub fn overlap(&self, other: &SparseMask) -> usize {
        (0..self.l.min(other.l))
            .map(|i| sorted_intersection(self.row(i), other.row(i)))
            .sum()
    }

    pub fn is_subset_of(&self, other: &SparseMask) -> bool {
        self.l == other.l && self.overlap(other) == self.nnz()
    }
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Per-row keep count for a target sparsity: `⌈(1 − sparsity)·l⌉`, never
/// below one.
pub fn keep_per_row(l: usize, sparsity: f64) -> usize {
    let raw = (1.0 - sparsity) * l as f64;
    // Absorb representation error such as (1 − 0.95)·2000 = 100.00000000000009.
    let keep = libm::ceil(raw - 1e-9) as usize;
    keep.clamp(1, l.max(1))
}

fn check_square(op: &'static str, s: &Matrix) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(shape_err(
            op,
            alloc::format!("scores must be l×l, got {}x{}", s.rows(), s.cols()),
        ));
    }
    Ok(())
}

/// Top-`keep_per_row` mask over exact scores `S`.
pub fn oracle_topk_mask(scores: &Matrix, keep_per_row: usize) -> Result<SparseMask> {
    check_square("oracle_topk_mask", scores)?;
    let rows = scores.row_topk_indices(keep_per_row)?;
    SparseMask::from_rows(scores.rows(), rows)
}

/// Top-`keep_per_row` mask over approximate scores. Same rule as the oracle,
/// applied to the predictor output.
pub fn predicted_topk_mask(approx: &Matrix, keep_per_row: usize) -> Result<SparseMask> {
    check_square("predicted_topk_mask", approx)?;
    let rows = approx.row_topk_indices(keep_per_row)?;
    SparseMask::from_rows(approx.rows(), rows)
}

/// Keeps entries `>= theta`. With `post_softmax` the rows are normalized
/// first and the threshold applies to attention weights. Rows can end up
/// empty; see [`SparseMask::empty_rows`].
pub fn threshold_mask(scores: &Matrix, theta: f64, post_softmax: bool) -> Result<SparseMask> {
    check_square("threshold_mask", scores)?;
    if theta.is_nan() || theta == f64::INFINITY {
        return Err(param_err("threshold_mask", "theta must be finite or -inf"));
    }
    let values = if post_softmax {
        scores.row_softmax()
    } else {
        scores.clone()
    };
    let rows = (0..values.rows())
        .map(|r| {
            values
                .row(r)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v >= theta)
                .map(|(c, _)| c)
                .collect()
        })
        .collect();
    SparseMask::from_rows(values.rows(), rows)
}

/// Orientation of a structured vector pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VectorOrientation {
    /// `v` consecutive rows of one column.
    #[default]
    Column,
    /// `v` consecutive columns of one row.
    Row,
}

/// Structured pattern made of `v × 1` vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ColVecSpec {
    pub v: usize,
    pub orientation: VectorOrientation,
}

impl ColVecSpec {
    pub fn column(v: usize) -> Self {
        ColVecSpec {
            v,
            orientation: VectorOrientation::Column,
        }
    }
}

/// Vector-granular mask. Rows are cut into bands of height `v` (the last may
/// be shorter); each column is scored by the sum of `|S̃|` over the band, and
/// the top `⌈(1 − target_sparsity)·l⌉` columns are kept for every row of the
/// band. The row orientation applies the same rule to `S̃ᵀ`.
pub fn colvec_mask(approx: &Matrix, spec: ColVecSpec, target_sparsity: f64) -> Result<SparseMask> {
    check_square("colvec_mask", approx)?;
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(param_err(
            "colvec_mask",
            alloc::format!("target sparsity {target_sparsity} outside (0, 1)"),
        ));
    }
    if spec.v == 0 {
        return Err(param_err("colvec_mask", "vector height must be positive"));
    }
    if spec.orientation == VectorOrientation::Row {
        let col = ColVecSpec::column(spec.v);
        return Ok(colvec_mask(&approx.transpose(), col, target_sparsity)?.transpose());
    }
    let l = approx.rows();
    let keep = keep_per_row(l, target_sparsity);
    let mut rows = Vec::with_capacity(l);
    let mut band_start = 0;
    while band_start < l {
        let band_end = (band_start + spec.v).min(l);
        let mut score = vec![0.0; l];
        for r in band_start..band_end {
            for (s, v) in score.iter_mut().zip(approx.row(r)) {
                *s += v.abs();
            }
        }
        let kept = topk_row(&score, keep);
        for _ in band_start..band_end {
            rows.push(kept.clone());
        }
        band_start = band_end;
    }
    SparseMask::from_rows(l, rows)
}

/// Uniformly random `keep_per_row` positions per row.
pub fn random_mask(l: usize, keep_per_row: usize, rng: &mut Rng) -> Result<SparseMask> {
    if keep_per_row == 0 || keep_per_row > l {
        return Err(param_err(
            "random_mask",
            alloc::format!("keep_per_row={keep_per_row} with l={l}"),
        ));
    }
    let rows = (0..l)
        .map(|_| rng.sample_indices(l, keep_per_row))
        .collect();
    SparseMask::from_rows(l, rows)
}

/// Static banded mask: each row keeps the `keep_per_row` positions nearest
/// the diagonal, shifted inward at the sequence edges so every row keeps the
/// same count. Used as the fixed-pattern control.
pub fn local_window_mask(l: usize, keep_per_row: usize) -> Result<SparseMask> {
    if keep_per_row == 0 || keep_per_row > l {
        return Err(param_err(
            "local_window_mask",
            alloc::format!("keep_per_row={keep_per_row} with l={l}"),
        ));
    }
    let before = (keep_per_row - 1) / 2;
    let rows = (0..l)
        .map(|i| {
            let start = i.saturating_sub(before).min(l - keep_per_row);
            (start..start + keep_per_row).collect()
        })
        .collect();
    SparseMask::from_rows(l, rows)
}

/// Synthetic pattern: the first `globals` columns are kept in every row, plus
/// a local band of `window` positions per row (`local_window_mask`). Rows
/// whose band overlaps the global columns keep fewer distinct entries.
pub fn global_token_mask(l: usize, globals: usize, window: usize) -> Result<SparseMask> {
    if globals > l || window == 0 || window > l {
        return Err(param_err(
            "global_token_mask",
            alloc::format!("globals={globals}, window={window} with l={l}"),
        ));
    }
    let local = local_window_mask(l, window)?;
    let rows = (0..l)
        .map(|i| {
            let mut row: Vec<usize> = (0..globals).collect();
            row.extend(local.row(i).iter().copied().filter(|&j| j >= globals));
            row
        })
        .collect();
    SparseMask::from_rows(l, rows)
}

/// Fraction of predicted positions that are also in the oracle mask.
/// Both masks must keep the same number of entries in every row.
pub fn prediction_accuracy(pred: &SparseMask, oracle: &SparseMask) -> Result<f64> {
    if pred.l() != oracle.l() {
        return Err(param_err("prediction_accuracy", "masks have different l"));
    }
    if (0..pred.l()).any(|i| pred.row_count(i) != oracle.row_count(i)) {
        return Err(param_err(
            "prediction_accuracy",
            "per-row kept counts differ",
        ));
    }
    if pred.nnz() == 0 {
        return Err(param_err("prediction_accuracy", "empty prediction"));
    }
    Ok(pred.overlap(oracle) as f64 / pred.nnz() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_scores(l: usize, seed: u64) -> Matrix {
        Matrix::random_normal(l, l, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn from_rows_validates() {
        assert!(SparseMask::from_rows(2, vec![vec![0, 0], vec![1]]).is_err());
        assert!(SparseMask::from_rows(2, vec![vec![2], vec![1]]).is_err());
        assert!(SparseMask::from_rows(3, vec![vec![0]]).is_err());
        let m = SparseMask::from_rows(3, vec![vec![2, 0], vec![], vec![1]]).unwrap();
        assert_eq!(m.row(0), &[0, 2]);
        assert_eq!(m.empty_rows(), vec![1]);
        assert_eq!(m.balanced_count(), None);
        assert!((m.sparsity() - (1.0 - 3.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn keep_counts() {
        assert_eq!(keep_per_row(2000, 0.95), 100);
        assert_eq!(keep_per_row(128, 0.9), 13);
        assert_eq!(keep_per_row(16, 0.0), 16);
        assert_eq!(keep_per_row(10, 0.999), 1);
    }

    #[test]
    fn oracle_full_and_global_column() {
        let s = random_scores(8, 1);
        let m = oracle_topk_mask(&s, 8).unwrap();
        assert_eq!(m, SparseMask::full(8));
        assert_eq!(m.sparsity(), 0.0);

        let mut s = random_scores(8, 2);
        for r in 0..8 {
            s.set(r, 5, 100.0);
        }
        let m = oracle_topk_mask(&s, 2).unwrap();
        assert!((0..8).all(|r| m.contains(r, 5)));
    }

    #[test]
    fn oracle_matches_sort() {
        let s = random_scores(16, 3);
        let m = oracle_topk_mask(&s, 2).unwrap();
        for r in 0..16 {
            let mut order: Vec<usize> = (0..16).collect();
            order.sort_by(|&a, &b| s.get(r, b).partial_cmp(&s.get(r, a)).unwrap());
            let mut want = order[..2].to_vec();
            want.sort();
            assert_eq!(m.row(r), &want[..]);
        }
    }

    #[test]
    fn perfect_and_inverted_predictor() {
        let s = random_scores(32, 4);
        let keep = 8;
        let oracle = oracle_topk_mask(&s, keep).unwrap();
        assert_eq!(predicted_topk_mask(&s, keep).unwrap(), oracle);
        let inverted = predicted_topk_mask(&s.scale(-1.0), keep).unwrap();
        // Bottom-8 and top-8 of 32 distinct values are disjoint.
        assert_eq!(prediction_accuracy(&inverted, &oracle).unwrap(), 0.0);
    }

    #[test]
    fn threshold_cases() {
        let s = random_scores(6, 5);
        assert_eq!(
            threshold_mask(&s, f64::NEG_INFINITY, false).unwrap(),
            SparseMask::full(6)
        );
        let flat = Matrix::zeros(4, 4);
        let m = threshold_mask(&flat, 2.0 / 4.0, true).unwrap();
        assert_eq!(m.empty_rows(), vec![0, 1, 2, 3]);
        assert!(threshold_mask(&flat, f64::NAN, true).is_err());
    }

    #[test]
    fn colvec_degenerate_and_constant() {
        let s = random_scores(20, 6);
        let keep = keep_per_row(20, 0.75);
        assert_eq!(
            colvec_mask(&s, ColVecSpec::column(1), 0.75).unwrap(),
            predicted_topk_mask(&s.map(f64::abs), keep).unwrap()
        );
        let c = Matrix::filled(10, 10, 0.3);
        let m = colvec_mask(&c, ColVecSpec::column(4), 0.7).unwrap();
        for r in 0..10 {
            assert_eq!(m.row(r), &[0, 1, 2]);
        }
        assert!(colvec_mask(&c, ColVecSpec::column(4), 0.0).is_err());
        assert!(colvec_mask(&c, ColVecSpec::column(4), 1.0).is_err());
    }

    #[test]
    fn colvec_structure_scan() {
        let s = random_scores(32, 7);
        let v = 4;
        let m = colvec_mask(&s, ColVecSpec::column(v), 0.9).unwrap();
        let dense = m.to_dense();
        for r in 0..32 {
            for c in 0..32 {
                if dense.get(r, c) == 1.0 {
                    let band = r / v * v;
                    assert!((band..band + v).all(|rr| dense.get(rr, c) == 1.0));
                }
            }
        }
    }

    #[test]
    fn row_orientation_is_transposed_rule() {
        let s = random_scores(12, 8);
        let spec = ColVecSpec {
            v: 3,
            orientation: VectorOrientation::Row,
        };
        let m = colvec_mask(&s, spec, 0.5).unwrap();
        let t = m.transpose();
        for band in (0..12).step_by(3) {
            assert_eq!(t.row(band), t.row(band + 1));
            assert_eq!(t.row(band), t.row(band + 2));
        }
    }

    #[test]
    fn random_mask_basics() {
        let mut rng = Rng::new(9);
        assert_eq!(random_mask(10, 10, &mut rng).unwrap(), SparseMask::full(10));
        let a = random_mask(10, 3, &mut Rng::new(1)).unwrap();
        let b = random_mask(10, 3, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.balanced_count(), Some(3));
        assert!(random_mask(10, 0, &mut rng).is_err());
    }

    #[test]
    fn local_window_is_balanced() {
        let m = local_window_mask(10, 3).unwrap();
        assert_eq!(m.balanced_count(), Some(3));
        assert_eq!(m.row(0), &[0, 1, 2]);
        assert_eq!(m.row(5), &[4, 5, 6]);
        assert_eq!(m.row(9), &[7, 8, 9]);
    }

    #[test]
    fn accuracy_worked_example() {
        // 200 predicted positions in one row of 2000, 100 of them correct.
        let pred = (0..200).collect::<Vec<_>>();
        let oracle = (100..300).collect::<Vec<_>>();
        let mut prow = vec![Vec::new(); 2000];
        let mut orow = vec![Vec::new(); 2000];
        prow[0] = pred;
        orow[0] = oracle;
        let p = SparseMask::from_rows(2000, prow).unwrap();
        let o = SparseMask::from_rows(2000, orow).unwrap();
        assert_eq!(prediction_accuracy(&p, &o).unwrap(), 0.5);
        assert_eq!(prediction_accuracy(&p, &p).unwrap(), 1.0);
        let short = SparseMask::diagonal(2000);
        assert!(prediction_accuracy(&p, &short).is_err());
    }
}
