//! Reverse-mode differentiation over matrix operations.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse, accumulating
//! adjoints, and returns the gradient of every leaf that was registered as a
//! parameter.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{Matrix, Precision};
use crate::maskgen::SparseMask;
use crate::predictor::{quantize, QuantSpec};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    /// `s − c·(1 − M)`; the mask is a constant of the pass.
    AdditiveMask(Var),
    /// Multiplies by a constant 0/1 pattern (post-softmax pruning).
    ZeroOutside(Var, SparseMask),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRow(Var, usize),
    /// Mean cross-entropy over rows of a logit matrix.
    CrossEntropy { logits: Var, probs: Matrix, labels: Vec<usize> },
    /// `‖a − b‖²_F`
    SquaredError(Var, Var),
    /// Fake quantization with a straight-through gradient inside the clamp
    /// range.
    Quantize { input: Var, limit: f64 },
    /// `Σ wᵢ·xᵢ` over `1 × 1` nodes.
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, m: Matrix) -> Var {
        let m = m.with_precision(self.precision);
        self.push(m, Op::Leaf { param: None })
    }

    /// A trainable input whose gradient is reported under `id`.
    pub fn param(&mut self, id: usize, m: &Matrix) -> Var {
        let m = m.clone().with_precision(self.precision);
        self.push(m, Op::Leaf { param: Some(id) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shape");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b)).expect("matmul_nt shape");
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("add shape");
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "add_row shape");
        let mut data = Vec::with_capacity(x.rows() * x.cols());
        for i in 0..x.rows() {
            data.extend(x.row(i).iter().zip(r.row(0)).map(|(a, b)| a + b));
        }
        let v = Matrix::from_vec_with(x.rows(), x.cols(), data, self.precision).unwrap();
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn additive_mask(&mut self, s: Var, mask: &SparseMask, c: f64) -> Var {
        let c = crate::attention::MaskConstant::new(c).expect("mask constant");
        let v = crate::attention::apply_additive_mask(self.value(s), mask, c).expect("mask shape");
        self.push(v, Op::AdditiveMask(s))
    }

    pub fn zero_outside(&mut self, a: Var, mask: &SparseMask) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros_with(x.rows(), x.cols(), x.precision());
        for i in 0..mask.l() {
            for &j in mask.row(i) {
                out.set(i, j, x.get(i, j));
            }
        }
        self.push(out, Op::ZeroOutside(a, mask.clone()))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).row_softmax();
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normalized = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            normalized.extend(row.iter().map(|v| (v - mean) * is));
        }
        let normalized = Matrix::from_vec_with(rows, cols, normalized, Precision::High).unwrap();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(normalized.get(r, c) * g.get(0, c) + b.get(0, c));
            }
        }
        let v = Matrix::from_vec_with(rows, cols, out, self.precision).unwrap();
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Matrix::from_vec_with(ids.len(), t.cols(), data, self.precision).unwrap();
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).col_slice(start, end).expect("slice");
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Matrix::concat_cols(&mats).expect("concat");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_row(&mut self, a: Var, r: usize) -> Var {
        let x = self.value(a);
        let v = Matrix::from_vec_with(1, x.cols(), x.row(r).to_vec(), self.precision).unwrap();
        self.push(v, Op::SelectRow(a, r))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), labels.len(), "one label per logit row");
        let probs = z.clone().with_precision(Precision::High).row_softmax();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -libm::log(probs.get(r, y).max(f64::MIN_POSITIVE)))
            .sum::<f64>()
            / labels.len() as f64;
        let v = Matrix::from_vec_with(1, 1, vec![loss], self.precision).unwrap();
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(a).sub(self.value(b)).expect("squared_error shape");
        let s: f64 = d.data().iter().map(|v| v * v).sum();
        let v = Matrix::from_vec_with(1, 1, vec![s], self.precision).unwrap();
        self.push(v, Op::SquaredError(a, b))
    }

    pub fn quantize(&mut self, a: Var, spec: QuantSpec) -> Var {
        let x = self.value(a);
        let limit = match spec.bits.max_level() {
            Some(levels) => spec.scale_for(x) * levels,
            None => f64::INFINITY,
        };
        let v = quantize(x, spec);
        self.push(v, Op::Quantize { input: a, limit })
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let v = Matrix::from_vec_with(1, 1, vec![s], self.precision).unwrap();
        self.push(v, Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf,
    /// indexed by parameter id. Parameters that do not influence the loss get
    /// `None`.
    pub fn backward(&self, loss: Var, num_params: usize) -> Vec<Option<Matrix>> {
        let p = self.precision;
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::from_vec_with(1, 1, vec![1.0], p).unwrap());
        let mut grads: Vec<Option<Matrix>> = vec![None; num_params];

        fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
            *slot = Some(match slot.take() {
                Some(prev) => prev.add(&g).expect("gradient shape"),
                None => g,
            });
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        accumulate(&mut grads[*id], g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b)).unwrap();
                    let gb = self.value(*a).matmul_tn(&g).unwrap();
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(self.value(*b)).unwrap();
                    let gb = g.matmul_tn(self.value(*a)).unwrap();
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let mut sums = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let cols = g.cols();
                    accumulate(&mut adj[row.0], Matrix::from_vec_with(1, cols, sums, p).unwrap());
                    accumulate(&mut adj[a.0], g);
                }
                Op::Scale(a, s) => accumulate(&mut adj[a.0], g.scale(*s)),
                Op::Relu(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(
                        &mut adj[a.0],
                        Matrix::from_vec_with(g.rows(), g.cols(), data, p).unwrap(),
                    );
                }
                Op::AdditiveMask(a) => accumulate(&mut adj[a.0], g),
                Op::ZeroOutside(a, mask) => {
                    let mut out = Matrix::zeros_with(g.rows(), g.cols(), p);
                    for i in 0..mask.l() {
                        for &j in mask.row(i) {
                            out.set(i, j, g.get(i, j));
                        }
                    }
                    accumulate(&mut adj[a.0], out);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut data = Vec::with_capacity(y.rows() * y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - inner)));
                    }
                    accumulate(
                        &mut adj[a.0],
                        Matrix::from_vec_with(y.rows(), y.cols(), data, p).unwrap(),
                    );
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let (rows, cols) = normalized.shape();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut dx = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let (gr, nr) = (g.row(r), normalized.row(r));
                        let mut mean_g = 0.0;
                        let mut mean_gn = 0.0;
                        for c in 0..cols {
                            dgamma[c] += gr[c] * nr[c];
                            dbeta[c] += gr[c];
                            let gh = gr[c] * gam.get(0, c);
                            mean_g += gh;
                            mean_gn += gh * nr[c];
                        }
                        mean_g /= cols as f64;
                        mean_gn /= cols as f64;
                        for c in 0..cols {
                            let gh = gr[c] * gam.get(0, c);
                            dx.push(inv_std[r] * (gh - mean_g - nr[c] * mean_gn));
                        }
                    }
                    accumulate(&mut adj[x.0], Matrix::from_vec_with(rows, cols, dx, p).unwrap());
                    accumulate(&mut adj[gamma.0], Matrix::from_vec_with(1, cols, dgamma, p).unwrap());
                    accumulate(&mut adj[beta.0], Matrix::from_vec_with(1, cols, dbeta, p).unwrap());
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut data = vec![0.0; t.rows() * t.cols()];
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, v) in data[i * t.cols()..(i + 1) * t.cols()].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(
                        &mut adj[table.0],
                        Matrix::from_vec_with(t.rows(), t.cols(), data, p).unwrap(),
                    );
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut out = Matrix::zeros_with(src.rows(), src.cols(), p);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            out.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut adj[a.0], out);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for part in parts {
                        let w = self.value(*part).cols();
                        accumulate(&mut adj[part.0], g.col_slice(start, start + w).unwrap());
                        start += w;
                    }
                }
                Op::SelectRow(a, r) => {
                    let src = self.value(*a);
                    let mut out = Matrix::zeros_with(src.rows(), src.cols(), p);
                    for c in 0..src.cols() {
                        out.set(*r, c, g.get(0, c));
                    }
                    accumulate(&mut adj[a.0], out);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        d.set(r, y, d.get(r, y) - 1.0);
                    }
                    accumulate(&mut adj[logits.0], d.scale(scale).with_precision(p));
                }
                Op::SquaredError(a, b) => {
                    let diff = self.value(*a).sub(self.value(*b)).unwrap();
                    let ga = diff.scale(2.0 * g.get(0, 0));
                    accumulate(&mut adj[b.0], ga.scale(-1.0));
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Quantize { input, limit } => {
                    let x = self.value(*input);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if xv.abs() <= *limit { *gv } else { 0.0 })
                        .collect();
                    accumulate(
                        &mut adj[input.0],
                        Matrix::from_vec_with(g.rows(), g.cols(), data, p).unwrap(),
                    );
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(
                            &mut adj[v.0],
                            Matrix::from_vec_with(1, 1, vec![w * g.get(0, 0)], p).unwrap(),
                        );
                    }
                }
            }
        }
        grads
    }
}
