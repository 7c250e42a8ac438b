//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Trainable
//! parameters are borrowed from a [`ParamStore`] rather than copied, so large
//! fully connected layers cost nothing to put on the tape. [`Tape::backward`]
//! walks the record in reverse and returns [`Gradients`] for every node that
//! depends on a variable or parameter.

use std::cell::Cell;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matmul, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow { x: Var, row: Var, sign: f64 },
    Scale(Var, f64),
    Relu(Var),
    PointNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ColumnL1 { a: Var, denom: Vec<f64> },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    GroupMax { x: Var, argmax: Vec<usize> },
    TileRows(Var),
    Reshape(Var),
    MeanRows(Var),
    SpectralNorm { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
    WeightedSum { x: Var, weights: Matrix },
    SelectRow { x: Var, row: usize },
    SliceRows { x: Var, start: usize },
    SpectralMatMul { x: Var, w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64, clamped: bool },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Epsilon added to the variance in [`Tape::point_norm`].
pub const NORM_EPS: f64 = 1e-5;
/// Epsilon added to column sums in [`Tape::column_l1_normalize`].
pub const L1_EPS: f64 = 1e-9;
/// Lower clamp for the spectral norm estimate.
pub const SIGMA_EPS: f64 = 1e-12;

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Corrupts the ReLU backward rule on the current thread. Only used as a
/// negative control for the gradient-check harness.
#[doc(hidden)]
pub fn inject_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self
                .params
                .expect("parameter node on a tape without a store")
                .get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Puts a trainable parameter from the attached store on the tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, ta, b, tb }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        self.row_broadcast(x, row, 1.0)
    }

    /// Subtracts a `1 × cols` row from every row of `x`.
    pub fn sub_row(&mut self, x: Var, row: Var) -> Var {
        self.row_broadcast(x, row, -1.0)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, sign: f64) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "broadcast operand must be a single row");
        assert_eq!(xv.cols(), rv.cols(), "broadcast width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += sign * b;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(out, Op::AddRow { x, row, sign }, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// Per-column standardization over the rows (the point axis) followed by
    /// a learned affine map. `gamma` and `beta` are `1 × cols`.
    pub fn point_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, f) = xv.shape();
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        assert_eq!(g.len(), f);
        assert_eq!(b.len(), f);
        let mut mean = vec![0.0; f];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / n as f64 + NORM_EPS).sqrt())
            .collect();
        let mut xhat = Matrix::zeros(n, f);
        let mut out = Matrix::zeros(n, f);
        for r in 0..n {
            let src = xv.row(r);
            for c in 0..f {
                let h = (src[c] - mean[c]) * inv_std[c];
                xhat[(r, c)] = h;
                out[(r, c)] = h * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::PointNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), needs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs(x);
        self.push(out, Op::LogSoftmaxRows(x), needs)
    }

    /// Divides every column by `L1_EPS + Σ_rows` of that column.
    pub fn column_l1_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, f) = av.shape();
        let mut denom = vec![L1_EPS; f];
        for r in 0..n {
            for (d, v) in denom.iter_mut().zip(av.row(r)) {
                *d += v;
            }
        }
        let mut out = av.clone();
        for r in 0..n {
            for (o, d) in out.row_mut(r).iter_mut().zip(&denom) {
                *o /= d;
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::ColumnL1 { a, denom }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(index.len(), xv.cols());
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(src));
        }
        let needs = self.needs(x);
        self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            needs,
        )
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    /// Ties resolve to the first row of the block.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (n, f) = xv.shape();
        assert!(group > 0 && n % group == 0, "{n} rows do not split into groups of {group}");
        let groups = n / group;
        let mut out = Matrix::zeros(groups, f);
        let mut argmax = vec![0; groups * f];
        for g in 0..groups {
            let base = g * group;
            out.row_mut(g).copy_from_slice(xv.row(base));
            argmax[g * f..(g + 1) * f].iter_mut().for_each(|a| *a = base);
            for r in base + 1..base + group {
                let src = xv.row(r);
                let dst = out.row_mut(g);
                for c in 0..f {
                    if src[c] > dst[c] {
                        dst[c] = src[c];
                        argmax[g * f + c] = r;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::GroupMax { x, argmax }, needs)
    }

    /// Column-wise max over all rows, as a `1 × cols` row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).rows();
        self.group_max(x, n)
    }

    /// Repeats a single row `n` times.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "tile_rows expects a single row");
        let mut out = Matrix::zeros(n, xv.cols());
        for r in 0..n {
            out.row_mut(r).copy_from_slice(xv.row(0));
        }
        let needs = self.needs(x);
        self.push(out, Op::TileRows(x), needs)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshaped(rows, cols);
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// Mean over rows, as a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, f) = xv.shape();
        let mut out = Matrix::zeros(1, f);
        for r in 0..n {
            for (o, v) in out.row_mut(0).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_in_place(1.0 / n as f64);
        let needs = self.needs(x);
        self.push(out, Op::MeanRows(x), needs)
    }

    /// `w / σ` with `σ = uᵀ w v` for fixed power-iteration vectors.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Var {
        let wv = self.value(w);
        assert_eq!(u.len(), wv.rows());
        assert_eq!(v.len(), wv.cols());
        let sigma = bilinear(u, wv, v).max(SIGMA_EPS);
        let out = wv.map(|x| x / sigma);
        let needs = self.needs(w);
        self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            needs,
        )
    }

    /// `Σ weights ⊙ x` as a `1 × 1` matrix.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix) -> Var {
        let s = self.value(x).dot(&weights);
        let needs = self.needs(x);
        self.push(Matrix::filled(1, 1, s), Op::WeightedSum { x, weights }, needs)
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let out = Matrix::row_vector(self.value(x).row(row));
        let needs = self.needs(x);
        self.push(out, Op::SelectRow { x, row }, needs)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let out = Matrix::from_vec(len, cols, xv.as_slice()[start * cols..(start + len) * cols].to_vec());
        let needs = self.needs(x);
        self.push(out, Op::SliceRows { x, start }, needs)
    }

    /// `x · w / σ` with `σ = max(uᵀ w v, SIGMA_EPS)` for constant
    /// power-iteration vectors `u`, `v`. A single-row `x` is handled in one
    /// pass over `w`.
    pub fn spectral_matmul(&mut self, x: Var, w: Var, u: &[f64], v: &[f64]) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!((u.len(), v.len()), wv.shape());
        assert_eq!(xv.cols(), wv.rows(), "spectral_matmul inner dimensions differ");
        let (mut out, raw) = if xv.rows() == 1 {
            let n = wv.cols();
            let mut y = vec![0.0; n];
            let mut s = 0.0;
            for (p, (&xp, &up)) in xv.as_slice().iter().zip(u).enumerate() {
                let row = wv.row(p);
                if xp != 0.0 {
                    for (o, w) in y.iter_mut().zip(row) {
                        *o += xp * w;
                    }
                }
                s += up * dot(row, v);
            }
            (Matrix::from_vec(1, n, y), s)
        } else {
            (matmul(xv, false, wv, false), bilinear(u, wv, v))
        };
        let clamped = raw < SIGMA_EPS;
        let sigma = raw.max(SIGMA_EPS);
        out.scale_in_place(1.0 / sigma);
        let needs = self.needs(x) || self.needs(w);
        self.push(out, Op::SpectralMatMul { x, w, u: u.to_vec(), v: v.to_vec(), sigma, clamped }, needs)
    }

    /// Hash of every piecewise branch taken so far: ReLU signs, max-pool
    /// winners and spectral clamps. Two passes with equal signatures lie on
    /// the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).as_slice() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::GroupMax { argmax, .. } => argmax.hash(&mut h),
                Op::SpectralMatMul { clamped, .. } => clamped.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let fault = BACKWARD_FAULT.with(|f| f.get());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[i] = Some(g);
                }
                Op::MatMul { a, ta, b, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let ga = if *ta {
                            matmul(bv, *tb, &g, true)
                        } else {
                            matmul(&g, false, bv, !*tb)
                        };
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = if *tb {
                            matmul(&g, true, av, *ta)
                        } else {
                            matmul(av, !*ta, &g, false)
                        };
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow { x, row, sign } => {
                    if self.needs(*row) {
                        let mut gr = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += sign * v;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Relu(x) => {
                    let out = self.value(Var(i));
                    let leak = if fault { 1.05 } else { 1.0 };
                    let gx = g.zip_map(out, |gv, o| if o > 0.0 { gv * leak } else { 0.0 });
                    accumulate(&mut grads, *x, gx);
                }
                Op::PointNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, f) = g.shape();
                    let gam = self.value(*gamma).as_slice();
                    if self.needs(*beta) {
                        let mut gb = Matrix::zeros(1, f);
                        for r in 0..n {
                            for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *beta, gb);
                    }
                    if self.needs(*gamma) {
                        let mut gg = Matrix::zeros(1, f);
                        for r in 0..n {
                            let (gr, hr) = (g.row(r), xhat.row(r));
                            for c in 0..f {
                                gg[(0, c)] += gr[c] * hr[c];
                            }
                        }
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.needs(*x) {
                        let mut sum_d = vec![0.0; f];
                        let mut sum_dh = vec![0.0; f];
                        for r in 0..n {
                            let (gr, hr) = (g.row(r), xhat.row(r));
                            for c in 0..f {
                                let d = gr[c] * gam[c];
                                sum_d[c] += d;
                                sum_dh[c] += d * hr[c];
                            }
                        }
                        let nf = n as f64;
                        let mut gx = Matrix::zeros(n, f);
                        for r in 0..n {
                            let (gr, hr) = (g.row(r), xhat.row(r));
                            let dst = gx.row_mut(r);
                            for c in 0..f {
                                let d = gr[c] * gam[c];
                                dst[c] = inv_std[c] / nf * (nf * d - sum_d[c] - hr[c] * sum_dh[c]);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = self.value(Var(i));
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = self.value(Var(i));
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ColumnL1 { a, denom } => {
                    let av = self.value(*a);
                    let (n, f) = av.shape();
                    let mut col = vec![0.0; f];
                    for r in 0..n {
                        let (gr, ar) = (g.row(r), av.row(r));
                        for c in 0..f {
                            col[c] += gr[c] * ar[c];
                        }
                    }
                    let mut ga = Matrix::zeros(n, f);
                    for r in 0..n {
                        let gr = g.row(r);
                        let dst = ga.row_mut(r);
                        for c in 0..f {
                            dst[c] = gr[c] / denom[c] - col[c] / (denom[c] * denom[c]);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut gp = Matrix::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { x, index } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for (r, &src) in index.iter().enumerate() {
                        for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GroupMax { x, argmax } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for gi in 0..g.rows() {
                        for c in 0..cols {
                            gx[(argmax[gi * cols + c], c)] += g[(gi, c)];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::TileRows(x) => {
                    let mut gx = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gx.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let (rows, cols) = self.shape(*x);
                    accumulate(&mut grads, *x, g.reshaped(rows, cols));
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SpectralNorm { w, u, v, sigma } => {
                    let wv = self.value(*w);
                    let inner = g.dot(wv);
                    let mut gw = g.map(|x| x / sigma);
                    let k = inner / (sigma * sigma);
                    for (r, ur) in u.iter().enumerate() {
                        for (o, vc) in gw.row_mut(r).iter_mut().zip(v) {
                            *o -= k * ur * vc;
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                }
                Op::WeightedSum { x, weights } => {
                    let s = g[(0, 0)];
                    accumulate(&mut grads, *x, weights.map(|w| w * s));
                }
                Op::SelectRow { x, row } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    gx.row_mut(*row).copy_from_slice(g.row(0));
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    gx.as_mut_slice()[start * cols..start * cols + g.len()].copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *x, gx);
                }
                Op::SpectralMatMul { x, w, u, v, sigma, clamped } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.needs(*x) {
                        let mut gx = matmul(&g, false, wv, true);
                        gx.scale_in_place(1.0 / sigma);
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        // d/dW of g·(xW)/σ: xᵀg/σ minus the σ term c·u vᵀ.
                        let c = if *clamped { 0.0 } else { g.dot(self.value(Var(i))) / sigma };
                        let gw = if xv.rows() == 1 {
                            let n = v.len();
                            let mut gw = Matrix::zeros(u.len(), n);
                            for (p, (&xp, &up)) in xv.as_slice().iter().zip(u).enumerate() {
                                let (a, b) = (xp / sigma, c * up);
                                for ((o, gj), vj) in gw.row_mut(p).iter_mut().zip(g.as_slice()).zip(v) {
                                    *o = a * gj - b * vj;
                                }
                            }
                            gw
                        } else {
                            let mut gw = matmul(xv, true, &g, false);
                            for (p, &up) in u.iter().enumerate() {
                                for (o, vj) in gw.row_mut(p).iter_mut().zip(v) {
                                    *o = *o / sigma - c * up * vj;
                                }
                            }
                            gw
                        };
                        accumulate(&mut grads, *w, gw);
                    }
                }
            }
        }

        let param_ids = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.value {
                Value::Param(id) => Some((i, id)),
                Value::Owned(_) => None,
            })
            .collect();
        Gradients { grads, param_ids }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn bilinear(u: &[f64], w: &Matrix, v: &[f64]) -> f64 {
    (0..w.rows())
        .map(|r| u[r] * w.row(r).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax outside of any tape.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    param_ids: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of a leaf, if it was reached by the sweep.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients, summed over every place a parameter was used.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.param_ids
            .iter()
            .filter_map(|&(node, id)| self.grads.get(node)?.as_ref().map(|g| (id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` around `x`.
    fn numeric(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check_unary(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = build(&mut t, v);
            let (r, c) = t.shape(y);
            Matrix::uniform(r, c, 1.0, &mut rng)
        };
        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.constant(m.clone());
            let y = build(&mut t, v);
            t.value(y).dot(&probe)
        };
        let mut t = Tape::new();
        let v = t.variable(x.clone());
        let y = build(&mut t, v);
        let loss = t.weighted_sum(y, probe.clone());
        let g = t.backward(loss);
        let analytic = g.wrt(v).cloned().unwrap();
        let num = numeric(&x, eval);
        let err = analytic.max_abs_diff(&num);
        assert!(err < 1e-7, "max abs error {err}: {analytic:?} vs {num:?}");
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn unary_rules_match_finite_differences() {
        check_unary(sample(4, 3, 1), |t, x| t.softmax_rows(x));
        check_unary(sample(4, 3, 2), |t, x| t.log_softmax_rows(x));
        check_unary(sample(4, 3, 3), |t, x| t.mean_rows(x));
        check_unary(sample(4, 3, 4), |t, x| t.max_rows(x));
        check_unary(sample(6, 3, 5), |t, x| t.group_max(x, 3));
        check_unary(sample(4, 3, 6), |t, x| t.reshape(x, 2, 6));
        check_unary(sample(4, 3, 7), |t, x| t.gather_rows(x, &[3, 0, 0, 2]));
        check_unary(sample(1, 3, 8), |t, x| t.tile_rows(x, 4));
        check_unary(sample(4, 3, 9), |t, x| t.select_row(x, 2));
        check_unary(sample(4, 3, 10).map(f64::exp), |t, x| t.column_l1_normalize(x));
        check_unary(sample(5, 3, 11), |t, x| {
            let gamma = t.constant(Matrix::row_vector(&[0.5, 2.0, -1.0]));
            let beta = t.constant(Matrix::row_vector(&[0.1, 0.0, 0.3]));
            t.point_norm(x, gamma, beta)
        });
        // Shifted positive so u^T W v stays well away from zero.
        check_unary(sample(3, 4, 12).map(|v| v + 1.5), |t, x| {
            t.spectral_norm(x, &[0.6, 0.0, 0.8], &[0.5, 0.5, 0.5, 0.5])
        });
        check_unary(sample(5, 3, 21), |t, x| t.slice_rows(x, 1, 3));
        // Weight as the variable, for single- and multi-row inputs.
        for rows in [1, 3] {
            let input = sample(rows, 3, 23 + rows as u64);
            let fixed = input.clone();
            check_unary(sample(3, 4, 22).map(|v| v + 1.5), move |t, w| {
                let x = t.constant(fixed.clone());
                t.spectral_matmul(x, w, &[0.6, 0.0, 0.8], &[0.5, 0.5, 0.5, 0.5])
            });
            check_unary(input.clone(), |t, x| {
                let w = t.constant(sample(3, 4, 22).map(|v| v + 1.5));
                t.spectral_matmul(x, w, &[0.6, 0.0, 0.8], &[0.5, 0.5, 0.5, 0.5])
            });
        }
        check_unary(sample(3, 4, 13), |t, x| {
            let other = t.constant(sample(4, 2, 14));
            t.matmul(x, other)
        });
        check_unary(sample(3, 4, 15), |t, x| {
            let other = t.constant(sample(3, 2, 16));
            t.matmul_t(x, true, other, false)
        });
        check_unary(sample(3, 4, 17), |t, x| {
            let other = t.constant(sample(2, 4, 18));
            t.matmul_t(other, false, x, true)
        });
        check_unary(sample(3, 4, 19), |t, x| {
            let row = t.constant(sample(1, 4, 20));
            let y = t.sub_row(x, row);
            let z = t.concat_cols(&[y, x]);
            t.scale(z, 0.5)
        });
    }

    #[test]
    fn reused_nodes_accumulate_gradients() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::row_vector(&[1.0, -2.0]));
        let y = t.add(x, x);
        let z = t.sub(y, x);
        let loss = t.weighted_sum(z, Matrix::row_vector(&[3.0, 5.0]));
        let g = t.backward(loss);
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[3.0, 5.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::row_vector(&[1.0]));
        let x = t.variable(Matrix::row_vector(&[2.0]));
        let y = t.matmul_t(c, true, x, false);
        let loss = t.weighted_sum(y, Matrix::filled(1, 1, 1.0));
        let g = t.backward(loss);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[1.0]);
    }
}
