//! Dense 2-D tensors and a tape-based reverse-mode autodiff engine.
//!
//! The tape records each operation as a node holding its output value;
//! [`Tape::backward`] walks the nodes in reverse, accumulating gradients
//! into every node that (transitively) depends on a gradient-bearing leaf.
//! Everything is `f64`; matrices are row-major.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix. Vectors are `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: [rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Tensor { shape: [rows, cols], data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { shape: [rows, cols], data: vec![value; rows * cols] }
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`.
    pub fn randn_scaled(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                // Box-Muller from two uniforms.
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * scale
            })
            .collect();
        Tensor { shape: [rows, cols], data }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                *out.at_mut(j, i) = self.at(i, j);
            }
        }
        out
    }

    /// Lower-triangular (inclusive) mask of ones.
    pub fn lower_triangular(n: usize) -> Tensor {
        let mut m = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                *m.at_mut(i, j) = 1.0;
            }
        }
        m
    }
}

/// `op(a) @ op(b)` where the flags transpose their argument.
pub fn matmul_raw(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (m, k1) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    assert_eq!(k1, k2, "matmul inner dimension mismatch ({m}x{k1} vs {k2}x{n})");
    let k = k1;
    let mut out = Tensor::zeros(m, n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let arow = a.row(i);
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = b.row(p);
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = a.row(i);
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = b.row(j);
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    *o += acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = a.row(p);
                let brow = b.row(p);
                for i in 0..m {
                    let av = arow[i];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out.data[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for p in 0..k {
                let arow = a.row(p);
                for i in 0..m {
                    let av = arow[i];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out.data[i * n..(i + 1) * n];
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += av * b.at(j, p);
                    }
                }
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// A node handle on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `(r x c) + (1 x c)`
    AddRow(usize, usize),
    /// `(r x c) * (1 x c)`
    MulRow(usize, usize),
    /// `(r x c) * (r x 1)`
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Softplus(usize),
    Silu(usize),
    /// Cumulative sum down the rows of each column.
    CumsumRows(usize),
    /// Softmax within each row.
    SoftmaxRows(usize),
    LayerNormRows { a: usize, eps: f64 },
    Transpose(usize),
    MeanAll(usize),
    SumAll(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { a: usize, start: usize, len: usize },
    /// Row gather; backward scatter-adds into the source rows.
    SelectRows { a: usize, indices: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
}

/// Records a computation and differentiates it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was needed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient-bearing leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf (inputs, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul_raw(self.value(a), ta, self.value(b), tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a: a.0, b: b.0, ta, tb }, value, ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: ta.shape, data };
        let ng = self.needs(a) || self.needs(b);
        self.push(op, value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(tr.rows(), 1);
        assert_eq!(ta.cols(), tr.cols());
        let mut value = ta.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                *value.at_mut(r, c) += tr.at(0, c);
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a.0, row.0), value, ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(tr.rows(), 1);
        assert_eq!(ta.cols(), tr.cols());
        let mut value = ta.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                *value.at_mut(r, c) *= tr.at(0, c);
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::MulRow(a.0, row.0), value, ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        assert_eq!(tc.cols(), 1);
        assert_eq!(ta.rows(), tc.rows());
        let mut value = ta.clone();
        for r in 0..value.rows() {
            let s = tc.at(r, 0);
            for c in 0..value.cols() {
                *value.at_mut(r, c) *= s;
            }
        }
        let ng = self.needs(a) || self.needs(col);
        self.push(Op::MulCol(a.0, col.0), value, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].value;
        let value = Tensor { shape: ta.shape, data: ta.data.iter().map(|&x| f(x)).collect() };
        let ng = self.needs(a);
        self.push(op, value, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a.0))
    }

    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut value = ta.clone();
        for i in 1..r {
            for j in 0..c {
                let prev = value.at(i - 1, j);
                *value.at_mut(i, j) += prev;
            }
        }
        let ng = self.needs(a);
        self.push(Op::CumsumRows(a.0), value, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut value = Tensor::zeros(r, c);
        for i in 0..r {
            let row = ta.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                *value.at_mut(i, j) = e;
                z += e;
            }
            for j in 0..c {
                *value.at_mut(i, j) /= z;
            }
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a.0), value, ng)
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut value = Tensor::zeros(r, c);
        for i in 0..r {
            let row = ta.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                *value.at_mut(i, j) = (row[j] - mean) * inv;
            }
        }
        let ng = self.needs(a);
        self.push(Op::LayerNormRows { a: a.0, eps }, value, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transposed();
        let ng = self.needs(a);
        self.push(Op::Transpose(a.0), value, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let m = ta.data.iter().sum::<f64>() / ta.len() as f64;
        let ng = self.needs(a);
        self.push(Op::MeanAll(a.0), Tensor::from_vec(1, 1, vec![m]), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let s = ta.data.iter().sum::<f64>();
        let ng = self.needs(a);
        self.push(Op::SumAll(a.0), Tensor::from_vec(1, 1, vec![s]), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols);
            data.extend_from_slice(&t.data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            Tensor::from_vec(rows, cols, data),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows);
            for r in 0..rows {
                let w = t.cols();
                value.data[r * cols + off..r * cols + off + w].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), value, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        assert!(start + len <= ta.rows(), "slice out of range");
        let cols = ta.cols();
        let data = ta.data[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(a);
        self.push(Op::SliceRows { a: a.0, start, len }, Tensor::from_vec(len, cols, data), ng)
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let ta = &self.nodes[a.0].value;
        let cols = ta.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(ta.row(i));
        }
        let ng = self.needs(a);
        self.push(
            Op::SelectRows { a: a.0, indices: indices.to_vec() },
            Tensor::from_vec(indices.len(), cols, data),
            ng,
        )
    }

    fn add_grad(&mut self, node: usize, g: &Tensor) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let slot = &mut self.nodes[node].grad;
        match slot {
            Some(existing) => {
                for (a, b) in existing.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            None => *slot = Some(g.clone()),
        }
    }

    /// Reverse pass from a scalar node. Gradients land on every node with
    /// `needs_grad`; read them back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let t = &self.nodes[loss.0].value;
        if t.len() != 1 {
            return Err(Error::Contract("backward target must be a scalar".into()));
        }
        if !t.data[0].is_finite() {
            return Err(Error::Numerical(format!("loss is not finite: {}", t.data[0])));
        }
        self.nodes[loss.0].grad = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let g = self.nodes[idx].grad.clone().unwrap();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (da, db) = match (ta, tb) {
                        (false, false) => {
                            (matmul_raw(&g, false, vb, true), matmul_raw(va, true, &g, false))
                        }
                        (false, true) => {
                            (matmul_raw(&g, false, vb, false), matmul_raw(&g, true, va, false))
                        }
                        (true, false) => {
                            (matmul_raw(vb, false, &g, true), matmul_raw(va, false, &g, false))
                        }
                        (true, true) => {
                            (matmul_raw(vb, true, &g, true), matmul_raw(&g, true, va, true))
                        }
                    };
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::Sub(a, b) => {
                    self.add_grad(a, &g);
                    let neg = Tensor {
                        shape: g.shape,
                        data: g.data.iter().map(|&x| -x).collect(),
                    };
                    self.add_grad(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = {
                        let vb = &self.nodes[b].value;
                        Tensor {
                            shape: g.shape,
                            data: g.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect(),
                        }
                    };
                    let db = {
                        let va = &self.nodes[a].value;
                        Tensor {
                            shape: g.shape,
                            data: g.data.iter().zip(&va.data).map(|(&x, &y)| x * y).collect(),
                        }
                    };
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Div(a, b) => {
                    let (da, db) = {
                        let va = &self.nodes[a].value;
                        let vb = &self.nodes[b].value;
                        let da = Tensor {
                            shape: g.shape,
                            data: g.data.iter().zip(&vb.data).map(|(&x, &y)| x / y).collect(),
                        };
                        let db = Tensor {
                            shape: g.shape,
                            data: g
                                .data
                                .iter()
                                .zip(va.data.iter().zip(&vb.data))
                                .map(|(&gx, (&x, &y))| -gx * x / (y * y))
                                .collect(),
                        };
                        (da, db)
                    };
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::AddRow(a, row) => {
                    self.add_grad(a, &g);
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            dr.data[c] += g.at(r, c);
                        }
                    }
                    self.add_grad(row, &dr);
                }
                Op::MulRow(a, row) => {
                    let (da, dr) = {
                        let va = &self.nodes[a].value;
                        let vr = &self.nodes[row].value;
                        let mut da = Tensor::zeros(g.rows(), g.cols());
                        let mut dr = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for c in 0..g.cols() {
                                *da.at_mut(r, c) = g.at(r, c) * vr.at(0, c);
                                dr.data[c] += g.at(r, c) * va.at(r, c);
                            }
                        }
                        (da, dr)
                    };
                    self.add_grad(a, &da);
                    self.add_grad(row, &dr);
                }
                Op::MulCol(a, col) => {
                    let (da, dc) = {
                        let va = &self.nodes[a].value;
                        let vc = &self.nodes[col].value;
                        let mut da = Tensor::zeros(g.rows(), g.cols());
                        let mut dc = Tensor::zeros(g.rows(), 1);
                        for r in 0..g.rows() {
                            let s = vc.at(r, 0);
                            let mut acc = 0.0;
                            for c in 0..g.cols() {
                                *da.at_mut(r, c) = g.at(r, c) * s;
                                acc += g.at(r, c) * va.at(r, c);
                            }
                            dc.data[r] = acc;
                        }
                        (da, dc)
                    };
                    self.add_grad(a, &da);
                    self.add_grad(col, &dc);
                }
                Op::Scale(a, s) => {
                    let da = Tensor {
                        shape: g.shape,
                        data: g.data.iter().map(|&x| x * s).collect(),
                    };
                    self.add_grad(a, &da);
                }
                Op::AddScalar(a) => self.add_grad(a, &g),
                Op::Square(a) => {
                    let da = {
                        let va = &self.nodes[a].value;
                        Tensor {
                            shape: g.shape,
                            data: g
                                .data
                                .iter()
                                .zip(&va.data)
                                .map(|(&gx, &x)| 2.0 * x * gx)
                                .collect(),
                        }
                    };
                    self.add_grad(a, &da);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[idx].value;
                    let da = Tensor {
                        shape: g.shape,
                        data: g.data.iter().zip(&y.data).map(|(&gx, &yx)| gx * yx).collect(),
                    };
                    self.add_grad(a, &da);
                }
                Op::Ln(a) => {
                    let da = {
                        let va = &self.nodes[a].value;
                        Tensor {
                            shape: g.shape,
                            data: g.data.iter().zip(&va.data).map(|(&gx, &x)| gx / x).collect(),
                        }
                    };
                    self.add_grad(a, &da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = Tensor {
                        shape: g.shape,
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(&gx, &yx)| gx * yx * (1.0 - yx))
                            .collect(),
                    };
                    self.add_grad(a, &da);
                }
                Op::LogSigmoid(a) => {
                    // d/dx ln(sigmoid(x)) = 1 - sigmoid(x)
                    let da = {
                        let va = &self.nodes[a].value;
                        Tensor {
                            shape: g.shape,
                            data: g
                                .data
                                .iter()
                                .zip(&va.data)
                                .map(|(&gx, &x)| gx * (1.0 - sigmoid(x)))
                                .collect(),
                        }
                    };
                    self.add_grad(a, &da);
                }
                Op::Softplus(a) => {
                    let da = {
                        let va = &self.nodes[a].value;
                        Tensor {
                            shape: g.shape,
                            data: g
                                .data
                                .iter()
                                .zip(&va.data)
                                .map(|(&gx, &x)| gx * sigmoid(x))
                                .collect(),
                        }
                    };
                    self.add_grad(a, &da);
                }
                Op::Silu(a) => {
                    let da = {
                        let va = &self.nodes[a].value;
                        Tensor {
                            shape: g.shape,
                            data: g
                                .data
                                .iter()
                                .zip(&va.data)
                                .map(|(&gx, &x)| {
                                    let s = sigmoid(x);
                                    gx * (s + x * s * (1.0 - s))
                                })
                                .collect(),
                        }
                    };
                    self.add_grad(a, &da);
                }
                Op::CumsumRows(a) => {
                    // Gradient is the reverse cumulative sum down each column.
                    let (r, c) = (g.rows(), g.cols());
                    let mut da = g.clone();
                    for i in (0..r.saturating_sub(1)).rev() {
                        for j in 0..c {
                            let nxt = da.at(i + 1, j);
                            *da.at_mut(i, j) += nxt;
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].value.clone();
                    let (r, c) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(r, c);
                    for i in 0..r {
                        let dot: f64 =
                            (0..c).map(|j| g.at(i, j) * y.at(i, j)).sum();
                        for j in 0..c {
                            *da.at_mut(i, j) = (g.at(i, j) - dot) * y.at(i, j);
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::LayerNormRows { a, eps } => {
                    let da = {
                        let x = &self.nodes[a].value;
                        let y = &self.nodes[idx].value;
                        let (r, c) = (x.rows(), x.cols());
                        let n = c as f64;
                        let mut da = Tensor::zeros(r, c);
                        for i in 0..r {
                            let row = x.row(i);
                            let mean = row.iter().sum::<f64>() / n;
                            let var =
                                row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                            let inv = 1.0 / (var + eps).sqrt();
                            let g_mean: f64 = (0..c).map(|j| g.at(i, j)).sum::<f64>() / n;
                            let gy_mean: f64 =
                                (0..c).map(|j| g.at(i, j) * y.at(i, j)).sum::<f64>() / n;
                            for j in 0..c {
                                *da.at_mut(i, j) =
                                    inv * (g.at(i, j) - g_mean - y.at(i, j) * gy_mean);
                            }
                        }
                        da
                    };
                    self.add_grad(a, &da);
                }
                Op::Transpose(a) => {
                    self.add_grad(a, &g.transposed());
                }
                Op::MeanAll(a) => {
                    let va_len = self.nodes[a].value.len();
                    let shape = self.nodes[a].value.shape;
                    let gv = g.data[0] / va_len as f64;
                    self.add_grad(a, &Tensor { shape, data: vec![gv; va_len] });
                }
                Op::SumAll(a) => {
                    let va_len = self.nodes[a].value.len();
                    let shape = self.nodes[a].value.shape;
                    self.add_grad(a, &Tensor { shape, data: vec![g.data[0]; va_len] });
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.nodes[p].value.rows();
                        let cols = self.nodes[p].value.cols();
                        let dp = Tensor::from_vec(
                            rows,
                            cols,
                            g.data[start * cols..(start + rows) * cols].to_vec(),
                        );
                        self.add_grad(p, &dp);
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p].value.cols();
                        let mut dp = Tensor::zeros(rows, w);
                        for r in 0..rows {
                            dp.data[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data[r * total + off..r * total + off + w]);
                        }
                        self.add_grad(p, &dp);
                        off += w;
                    }
                }
                Op::SliceRows { a, start, len } => {
                    let (rows, cols) = {
                        let va = &self.nodes[a].value;
                        (va.rows(), va.cols())
                    };
                    let mut da = Tensor::zeros(rows, cols);
                    da.data[start * cols..(start + len) * cols].copy_from_slice(&g.data);
                    self.add_grad(a, &da);
                }
                Op::SelectRows { a, indices } => {
                    let (rows, cols) = {
                        let va = &self.nodes[a].value;
                        (va.rows(), va.cols())
                    };
                    let mut da = Tensor::zeros(rows, cols);
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da.data[src * cols + c] += g.at(r, c);
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central finite difference of a scalar-valued builder at one input.
    fn fd_check(
        build: impl Fn(&mut Tape, Var) -> Var,
        input: Tensor,
        eps: f64,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().clone();

        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data[i] += eps;
            let mut minus = input.clone();
            minus.data[i] -= eps;
            let f = |t: Tensor| {
                let mut tape = Tape::new();
                let x = tape.param(t);
                let loss = build(&mut tape, x);
                tape.value(loss).data[0]
            };
            let fd = (f(plus) - f(minus)) / (2.0 * eps);
            let an = analytic.data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel <= tol, "elem {i}: fd={fd} analytic={an} rel={rel}");
        }
    }

    fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::rng_from_seed(seed);
        Tensor::randn_scaled(rows, cols, 1, &mut r)
    }

    #[test]
    fn matmul_against_hand_result() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul_raw(&a, false, &b, false);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
        // Transpose flags agree with materialized transposes.
        let at = a.transposed();
        let bt = b.transposed();
        assert_eq!(matmul_raw(&at, true, &b, false).data, c.data);
        assert_eq!(matmul_raw(&a, false, &bt, true).data, c.data);
        assert_eq!(matmul_raw(&at, true, &bt, true).data, c.data);
    }

    #[test]
    fn grad_matmul_all_flag_combos() {
        for (ta, tb, seed) in
            [(false, false, 1u64), (false, true, 2), (true, false, 3), (true, true, 4)]
        {
            let other = rand_t(3, 3, 100 + seed);
            fd_check(
                move |tape, x| {
                    let o = tape.constant(other.clone());
                    let y = tape.matmul_t(x, ta, o, tb);
                    let sq = tape.square(y);
                    tape.mean_all(sq)
                },
                rand_t(3, 3, seed),
                1e-5,
                1e-6,
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        fd_check(
            |tape, x| {
                let s = tape.sigmoid(x);
                let e = tape.exp(s);
                let sq = tape.square(e);
                let sp = tape.softplus(sq);
                let si = tape.silu(sp);
                tape.mean_all(si)
            },
            rand_t(4, 5, 9),
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn grad_log_sigmoid_and_ln() {
        fd_check(
            |tape, x| {
                let l = tape.log_sigmoid(x);
                let neg = tape.scale(x, -1.0);
                let l2 = tape.log_sigmoid(neg);
                let s = tape.add(l, l2);
                let sq = tape.square(s);
                let shifted = tape.add_scalar(sq, 1.5);
                let ln = tape.ln(shifted);
                tape.sum_all(ln)
            },
            rand_t(3, 4, 10),
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_cumsum_layernorm() {
        fd_check(
            |tape, x| {
                let c = tape.cumsum_rows(x);
                let sm = tape.softmax_rows(c);
                let ln = tape.layer_norm_rows(sm, 1e-5);
                let sq = tape.square(ln);
                tape.mean_all(sq)
            },
            rand_t(5, 4, 11),
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn grad_broadcast_and_structure_ops() {
        let row = rand_t(1, 4, 12);
        let col = rand_t(6, 1, 13);
        fd_check(
            move |tape, x| {
                let r = tape.constant(row.clone());
                let c = tape.constant(col.clone());
                let a = tape.add_row(x, r);
                let b = tape.mul_row(a, r);
                let d = tape.mul_col(b, c);
                let top = tape.slice_rows(d, 0, 3);
                let bottom = tape.slice_rows(d, 3, 3);
                let sum = tape.add(top, bottom);
                let cat = tape.concat_rows(&[sum, top]);
                let sel = tape.select_rows(cat, &[0, 0, 2, 5]);
                let t = tape.transpose(sel);
                let sq = tape.square(t);
                tape.mean_all(sq)
            },
            rand_t(6, 4, 14),
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn grad_broadcast_params_themselves() {
        // Gradients flow into the broadcast side too.
        let base = rand_t(5, 3, 15);
        fd_check(
            move |tape, x| {
                let b = tape.constant(base.clone());
                let a = tape.add_row(b, x);
                let m = tape.mul_row(a, x);
                let sq = tape.square(m);
                tape.sum_all(sq)
            },
            rand_t(1, 3, 16),
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn grad_div_and_concat_cols() {
        let denom = {
            let mut t = rand_t(4, 3, 17);
            t.data.iter_mut().for_each(|v| *v = v.abs() + 0.5);
            t
        };
        fd_check(
            move |tape, x| {
                let d = tape.constant(denom.clone());
                let q = tape.div(x, d);
                let cat = tape.concat_cols(&[q, x]);
                let sq = tape.square(cat);
                tape.mean_all(sq)
            },
            rand_t(4, 3, 18),
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn unused_parameter_has_no_grad() {
        let mut tape = Tape::new();
        let used = tape.param(rand_t(2, 2, 19));
        let unused = tape.param(rand_t(2, 2, 20));
        let sq = tape.square(used);
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(used).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn loss_scale_doubles_gradients() {
        let input = rand_t(3, 3, 21);
        let grad_at = |factor: f64| {
            let mut tape = Tape::new();
            let x = tape.param(input.clone());
            let sq = tape.square(x);
            let m = tape.mean_all(sq);
            let loss = tape.scale(m, factor);
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().clone()
        };
        let g1 = grad_at(1.0);
        let g2 = grad_at(2.0);
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_nan() {
        let mut tape = Tape::new();
        let x = tape.param(rand_t(2, 2, 22));
        assert!(tape.backward(x).is_err());
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(1, 1, vec![f64::NAN]));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::Numerical(_))));
    }
}
