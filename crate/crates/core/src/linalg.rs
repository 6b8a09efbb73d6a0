//! Dense row-major matrices, the deterministic RNG, and the handful of
//! kernels everything else is built from.
//!
//! Elements are stored as `f64`. A matrix in [`Precision::Standard`] rounds
//! every element to the nearest `f32` after each operation, so results track
//! single-precision arithmetic while accumulation still happens in `f64`.
//! [`Precision::High`] keeps full `f64` values and is what gradient checks use.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{param_err, shape_err, Result};

/// Element precision of a [`Matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Precision {
    /// 32-bit elements.
    #[default]
    Standard,
    /// 64-bit elements.
    High,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Standard => x as f32 as f64,
            Precision::High => x,
        }
    }

    /// The wider of two precisions; binary ops promote to it.
    #[inline]
    pub fn promote(self, other: Precision) -> Precision {
        self.max(other)
    }
}

/// Dense 2-D array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    precision: Precision,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} ({:?})", self.rows, self.cols, self.precision)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::zeros_with(rows, cols, Precision::Standard)
    }

    pub fn zeros_with(rows: usize, cols: usize, precision: Precision) -> Self {
        Matrix {
            rows,
            cols,
            precision,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            precision: Precision::Standard,
            data: vec![value; rows * cols],
        }
        .rounded()
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps a row-major buffer. Values are rounded to the default
    /// (standard) precision.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec_with(rows, cols, data, Precision::Standard)
    }

    pub fn from_vec_with(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                alloc::format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix {
            rows,
            cols,
            precision,
            data,
        }
        .rounded())
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn random_normal(rows: usize, cols: usize, std_dev: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std_dev).collect();
        Matrix {
            rows,
            cols,
            precision: Precision::Standard,
            data,
        }
        .rounded()
    }

    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * rng.uniform())
            .collect();
        Matrix {
            rows,
            cols,
            precision: Precision::Standard,
            data,
        }
        .rounded()
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Writes one element, rounding it to the matrix precision.
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = self.precision.round(v);
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Converts to another precision. Narrowing rounds every element.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self.rounded()
    }

    fn rounded(mut self) -> Self {
        if self.precision == Precision::Standard {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self
    }

    /// Result constructor shared by the kernels below.
    fn build(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Self {
        Matrix {
            rows,
            cols,
            precision,
            data,
        }
        .rounded()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            precision: self.precision,
            data: out,
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                alloc::format!(
                    "{}x{} · {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        // i-k-j order, four output rows at a time; every output element is
        // accumulated over k in ascending order.
        let k = self.cols;
        // Mostly-zero left operands (masked attention weights) are cheaper
        // row by row, where each zero skips a whole row of `other`.
        let zeros = self.data.iter().filter(|&&a| a == 0.0).count();
        let blocked_end = if 2 * zeros > self.data.len() { 0 } else { n - n % 4 };
        let mut i = 0;
        while i < blocked_end {
            let (o0, rest) = out[i * m..(i + 4) * m].split_at_mut(m);
            let (o1, rest) = rest.split_at_mut(m);
            let (o2, o3) = rest.split_at_mut(m);
            for kk in 0..k {
                let d = &self.data;
                let (x0, x1, x2, x3) = (d[i * k + kk], d[(i + 1) * k + kk], d[(i + 2) * k + kk], d[(i + 3) * k + kk]);
                if x0 == 0.0 && x1 == 0.0 && x2 == 0.0 && x3 == 0.0 {
                    continue;
                }
                let b = other.row(kk);
                for j in 0..m {
                    let y = b[j];
                    o0[j] += x0 * y;
                    o1[j] += x1 * y;
                    o2[j] += x2 * y;
                    o3[j] += x3 * y;
                }
            }
            i += 4;
        }
        for i in blocked_end..n {
            let acc = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in acc.iter_mut().zip(other.row(kk)) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::build(n, m, out, self.precision.promote(other.precision)))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_nt",
                alloc::format!(
                    "{}x{} · ({}x{})ᵀ",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            let row = &mut out[i * m..(i + 1) * m];
            let mut j = 0;
            while j + 4 <= m {
                let d = dot4(a, [other.row(j), other.row(j + 1), other.row(j + 2), other.row(j + 3)]);
                row[j..j + 4].copy_from_slice(&d);
                j += 4;
            }
            for j in j..m {
                row[j] = dot(a, other.row(j));
            }
        }
        Ok(Self::build(n, m, out, self.precision.promote(other.precision)))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err(
                "matmul_tn",
                alloc::format!(
                    "({}x{})ᵀ · {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * m..(i + 1) * m].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self::build(n, m, out, self.precision.promote(other.precision)))
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                alloc::format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::build(
            self.rows,
            self.cols,
            data,
            self.precision.promote(other.precision),
        ))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::build(self.rows, self.cols, data, self.precision)
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(shape_err(
                "col_slice",
                alloc::format!("{start}..{end} of {} columns", self.cols),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: w,
            precision: self.precision,
            data,
        })
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(parts: &[Matrix]) -> Result<Matrix> {
        let Some(first) = parts.first() else {
            return Ok(Matrix::zeros(0, 0));
        };
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let precision = parts
            .iter()
            .fold(Precision::Standard, |acc, p| acc.promote(p.precision));
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::build(rows, cols, data, precision))
    }

    /// Row-wise softmax with max subtraction.
    pub fn row_softmax(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let row = self.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut sum = 0.0;
            for &v in row {
                let e = libm::exp(v - max);
                sum += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= sum;
            }
        }
        Self::build(self.rows, self.cols, data, self.precision)
    }

    /// Per row, the `k_keep` columns holding the largest values, returned in
    /// ascending column order. Ties go to the smaller column index.
    pub fn row_topk_indices(&self, k_keep: usize) -> Result<Vec<Vec<usize>>> {
        if k_keep == 0 || k_keep > self.cols {
            return Err(param_err(
                "row_topk_indices",
                alloc::format!("k_keep={k_keep} with {} columns", self.cols),
            ));
        }
        Ok((0..self.rows)
            .map(|r| topk_row(self.row(r), k_keep))
            .collect())
    }
}

/// Top-k of one row under the (value desc, index asc) total order.
pub(crate) fn topk_row(row: &[f64], k_keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k_keep < idx.len() {
        idx.select_nth_unstable_by(k_keep - 1, cmp);
        idx.truncate(k_keep);
    }
    idx.sort_unstable();
    idx
}

#[inline]
/// Four dot products against a shared left operand; each result matches
/// [`dot`] bit for bit.
fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
    let n = a.len();
    let mut acc = [[0.0f64; 4]; 4];
    let full = n - n % 4;
    let mut t = 0;
    while t < full {
        for (acc, b) in acc.iter_mut().zip(&b) {
            for l in 0..4 {
                acc[l] += a[t + l] * b[t + l];
            }
        }
        t += 4;
    }
    let mut out = [0.0; 4];
    for ((o, acc), b) in out.iter_mut().zip(&acc).zip(&b) {
        let mut tail = 0.0;
        for t in full..n {
            tail += a[t] * b[t];
        }
        *o = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four interleaved partial sums combined in a fixed order.
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Seeded ChaCha8 stream. The same seed yields the same sequence on every
/// platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream keyed by `(seed, stream)`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `k` distinct values from `0..n`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn blocked_kernels_match_scalar_accumulation() {
        let mut rng = Rng::new(12);
        for (n, k, m) in [(1, 1, 1), (5, 7, 6), (8, 9, 13), (4, 4, 4), (11, 3, 2)] {
            let a = Matrix::random_normal(n, k, 1.0, &mut rng).with_precision(Precision::High);
            let b = Matrix::random_normal(m, k, 1.0, &mut rng).with_precision(Precision::High);
            let nt = a.matmul_nt(&b).unwrap();
            for i in 0..n {
                for j in 0..m {
                    assert_eq!(nt.get(i, j).to_bits(), dot(a.row(i), b.row(j)).to_bits());
                }
            }
            let bt = b.transpose();
            let ab = a.matmul(&bt).unwrap();
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += a.get(i, t) * bt.get(t, j);
                    }
                    assert_eq!(ab.get(i, j), acc);
                }
            }
        }
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f64;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn scalar_and_identity_products() {
        let a = Matrix::from_rows(&[[2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().get(0, 0), 6.0);

        let mut rng = Rng::new(1);
        let b = Matrix::random_normal(3, 5, 1.0, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let b = Matrix::random_normal(7, 4, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-6), "{x} vs {y}");
        }
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        let tn = a.transpose().matmul_tn(&b).unwrap();
        for ((x, y), z) in c.data().iter().zip(nt.data()).zip(tn.data()) {
            assert!((x - y).abs() < 1e-6 && (x - z).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&Matrix::zeros(2, 3)),
            Err(crate::Error::Shape { .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap().row_softmax();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = Matrix::from_rows(&[[1e4, 0.0]]).unwrap().row_softmax();
        assert_eq!(s.get(0, 0), 1.0);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-300 + f64::EPSILON);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = Rng::new(3);
        let m = Matrix::random_normal(4, 6, 3.0, &mut rng).with_precision(Precision::High);
        let s = m.row_softmax();
        for r in 0..4 {
            let row = m.row(r);
            let max = row.iter().copied().fold(f64::MIN, f64::max);
            let denom: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            let total: f64 = s.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            for c in 0..6 {
                let want = libm::exp(row[c] - max) / denom;
                assert!((s.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topk_tie_rule() {
        let m = Matrix::from_rows(&[[0.1, 0.9, 0.5, 0.9]]).unwrap();
        assert_eq!(m.row_topk_indices(2).unwrap(), vec![vec![1, 3]]);
        assert_eq!(m.row_topk_indices(4).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert!(m.row_topk_indices(0).is_err());
        assert!(m.row_topk_indices(5).is_err());
        // Ties beyond the cut go to lower indices.
        let m = Matrix::from_rows(&[[1.0, 1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(m.row_topk_indices(2).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = Rng::new(11);
        let m = Matrix::random_normal(8, 16, 1.0, &mut rng);
        let got = m.row_topk_indices(4).unwrap();
        for r in 0..8 {
            let mut order: Vec<usize> = (0..16).collect();
            order.sort_by(|&a, &b| m.get(r, b).partial_cmp(&m.get(r, a)).unwrap().then(a.cmp(&b)));
            let mut want = order[..4].to_vec();
            want.sort();
            assert_eq!(got[r], want);
        }
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::stream(42, 1);
        let mut d = Rng::new(42);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn standard_precision_rounds_to_f32() {
        let m = Matrix::from_vec(1, 1, vec![0.1]).unwrap();
        assert_eq!(m.get(0, 0), 0.1f32 as f64);
        let h = Matrix::from_vec_with(1, 1, vec![0.1], Precision::High).unwrap();
        assert_eq!(h.get(0, 0), 0.1);
    }
}
