//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node whose parents precede it, so
//! the node order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep. Graphs are built per batch (or per instance) and
//! dropped after the backward pass.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{NmaError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound applied to `log` inputs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Embed { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Reshape(Var),
    SoftmaxRows(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Sum(Var),
    SumCols(Var),
    PairAbsDiff(Var),
    Clamp { x: Var, lo: Tensor, hi: Tensor },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Backward {
    node_grads: Vec<Option<Tensor>>,
    pub params: Gradients,
}

impl Backward {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NmaError {
    NmaError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    let [ar, ac] = a.shape();
    let [br, bc] = b.shape();
    (br == ar || br == 1) && (bc == ac || bc == 1)
}

/// Sums `g` (shaped like the broadcast output) down to `shape`.
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let [gr, gc] = g.shape();
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..gr {
        let oi = if shape[0] == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if shape[1] == 1 { 0 } else { j };
            out.set(oi, oj, out.at(oi, oj) + g.at(i, j));
        }
    }
    out
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [r, c] = a.shape();
    let [br, bc] = b.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let bi = if br == 1 { 0 } else { i };
        for j in 0..c {
            let bj = if bc == 1 { 0 } else { j };
            out.push(f(a.at(i, j), b.at(bi, bj)));
        }
    }
    Tensor::new([r, c], out).expect("broadcast output is sized")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NmaError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant or differentiable input (gradients are reported via
    /// [`Backward::wrt`]).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let t = self.store.get(id).clone();
        self.push("param", t, Op::Param(id))
    }

    /// Row lookup into an embedding table; gradients are row-sparse.
    pub fn embed(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.store.get(id);
        let d = table.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= table.rows() {
                return Err(NmaError::ShapeMismatch {
                    op: "embed",
                    left: table.shape(),
                    right: [r, d],
                });
            }
            out.extend_from_slice(table.row_slice(r));
        }
        let t = Tensor::new([rows.len(), d], out)?;
        self.push(
            "embed",
            t,
            Op::Embed {
                param: id,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        self.push("matmul", t, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul_t(self.value(b))?;
        self.push("matmul_t", t, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        self.push("transpose", t, Op::Transpose(a))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(mismatch(name, ta, tb));
        }
        let t = zip_broadcast(ta, tb, f);
        self.push(name, t, op)
    }

    /// Elementwise `a + b`; `b` may broadcast over rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * s);
        self.push("scale", t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v + s);
        self.push("add_scalar", t, Op::AddScalar(a))
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .unwrap_or(0);
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat", self.value(parts[0]), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let t = Tensor::new([rows, cols], out)?;
        self.push("concat", t, Op::Concat(parts.to_vec()))
    }

    /// Output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= ta.rows() {
                return Err(NmaError::ShapeMismatch {
                    op: "gather_rows",
                    left: ta.shape(),
                    right: [r, c],
                });
            }
            out.extend_from_slice(ta.row_slice(r));
        }
        let t = Tensor::new([idx.len(), c], out)?;
        self.push("gather_rows", t, Op::GatherRows(a, idx.to_vec()))
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let [r, c] = ta.shape();
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(NmaError::ShapeMismatch {
                    op: "pick",
                    left: ta.shape(),
                    right: [i, j],
                });
            }
            out.push(ta.at(i, j));
        }
        self.push("pick", Tensor::column(out), Op::Pick(a, at.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 2]) -> Result<Var> {
        let ta = self.value(a);
        if shape[0] * shape[1] != ta.len() {
            return Err(NmaError::ShapeMismatch {
                op: "reshape",
                left: ta.shape(),
                right: shape,
            });
        }
        let t = Tensor::new(shape, ta.data().to_vec())?;
        self.push("reshape", t, Op::Reshape(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let [r, c] = ta.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = ta.row_slice(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        let t = Tensor::new([r, c], out)?;
        self.push("softmax_rows", t, Op::SoftmaxRows(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu(a))
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(LOG_FLOOR).ln());
        self.push("log", t, Op::Log(a))
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push("sum", t, Op::Sum(a))
    }

    /// Per-row sum: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::column((0..ta.rows()).map(|i| ta.row_slice(i).iter().sum()).collect());
        self.push("sum_cols", t, Op::SumCols(a))
    }

    /// `out[m, n] = |x_m − x_n|` for a row or column vector `x`.
    pub fn pair_abs_diff(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != 1 && ta.cols() != 1 {
            return Err(NmaError::ShapeMismatch {
                op: "pair_abs_diff",
                left: ta.shape(),
                right: [ta.len(), 1],
            });
        }
        let x = ta.data();
        let n = x.len();
        let mut out = Vec::with_capacity(n * n);
        for &xm in x {
            for &xn in x {
                out.push((xm - xn).abs());
            }
        }
        let t = Tensor::new([n, n], out)?;
        self.push("pair_abs_diff", t, Op::PairAbsDiff(a))
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient passes only where the
    /// input lies strictly inside the bounds.
    pub fn clamp(&mut self, a: Var, lo: Tensor, hi: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if lo.shape() != ta.shape() {
            return Err(mismatch("clamp", ta, &lo));
        }
        if hi.shape() != ta.shape() {
            return Err(mismatch("clamp", ta, &hi));
        }
        let data = ta
            .data()
            .iter()
            .zip(lo.data().iter().zip(hi.data()))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push("clamp", t, Op::Clamp { x: a, lo, hi })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Backward> {
        let rs = self.shape(root);
        if rs != [1, 1] {
            return Err(NmaError::NonScalarRoot(rs));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut params = Gradients::new();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => params.add_dense(*id, &g),
                Op::Embed { param, rows } => {
                    let shape = self.store.get(*param).shape();
                    for (i, &r) in rows.iter().enumerate() {
                        params.add_row(*param, shape, r, g.row_slice(i));
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    let sb = self.shape(*b);
                    acc(&mut grads, *b, reduce_to(&g, sb));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    let sb = self.shape(*b);
                    acc(&mut grads, *b, reduce_to(&g, sb).map(|v| -v));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = zip_broadcast(&g, tb, |x, y| x * y);
                    let gb_full = zip_broadcast(&g, tb, |x, _| x);
                    let gb_full = Tensor::new(
                        g.shape(),
                        gb_full
                            .data()
                            .iter()
                            .zip(ta.data())
                            .map(|(x, y)| x * y)
                            .collect(),
                    )?;
                    acc(&mut grads, *b, reduce_to(&gb_full, tb.shape()));
                    acc(&mut grads, *a, ga);
                }
                Op::Div(a, b) => {
                    let tb = self.value(*b);
                    let ga = zip_broadcast(&g, tb, |x, y| x / y);
                    // d(a/b)/db = -a / b²  =  -(a/b) / b
                    let out = &node.value;
                    let q = Tensor::new(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(out.data())
                            .map(|(x, o)| -x * o)
                            .collect(),
                    )?;
                    let gb_full = zip_broadcast(&q, tb, |x, y| x / y);
                    acc(&mut grads, *b, reduce_to(&gb_full, tb.shape()));
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let [pr, pc] = self.shape(p);
                        let mut gp = Vec::with_capacity(pr * pc);
                        for r in 0..pr {
                            gp.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        acc(&mut grads, p, Tensor::new([pr, pc], gp)?);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let [ar, ac] = self.shape(*a);
                    let mut ga = Tensor::zeros(ar, ac);
                    for (i, &r) in idx.iter().enumerate() {
                        let src = g.row_slice(i);
                        let dst = &mut ga.data_mut()[r * ac..(r + 1) * ac];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Pick(a, at) => {
                    let [ar, ac] = self.shape(*a);
                    let mut ga = Tensor::zeros(ar, ac);
                    for (k, &(i, j)) in at.iter().enumerate() {
                        ga.set(i, j, ga.at(i, j) + g.data()[k]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let sa = self.shape(*a);
                    acc(&mut grads, *a, Tensor::new(sa, g.data().to_vec())?);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let [r, c] = y.shape();
                    let mut ga = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                    }
                    acc(&mut grads, *a, Tensor::new([r, c], ga)?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    acc(&mut grads, *a, Tensor::new(y.shape(), ga)?);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Tensor::new(x.shape(), ga)?);
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let ga = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| if *x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Tensor::new(x.shape(), ga)?);
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SumCols(a) => {
                    let [r, c] = self.shape(*a);
                    let mut ga = Vec::with_capacity(r * c);
                    for i in 0..r {
                        ga.extend(std::iter::repeat_n(g.data()[i], c));
                    }
                    acc(&mut grads, *a, Tensor::new([r, c], ga)?);
                }
                Op::PairAbsDiff(a) => {
                    let xa = self.value(*a);
                    let x = xa.data();
                    let n = x.len();
                    let mut gx = vec![0.0; n];
                    for m in 0..n {
                        for k in 0..n {
                            let d = x[m] - x[k];
                            if d == 0.0 {
                                continue;
                            }
                            let s = d.signum() * g.data()[m * n + k];
                            gx[m] += s;
                            gx[k] -= s;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(xa.shape(), gx)?);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x);
                    let ga = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(lo.data().iter().zip(hi.data()))
                        .map(|((g, v), (l, h))| if v > l && v < h { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(xv.shape(), ga)?);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Backward {
            node_grads: grads,
            params,
        })
    }
}
