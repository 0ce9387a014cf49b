//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Graph`]; [`Graph::backward`] walks
//! the tape in reverse and accumulates vector-Jacobian products. Sequences of
//! different lengths are packed row-wise into one matrix and described by
//! [`Segments`] so that row-wise layers run as a single product while
//! sequence-aware layers (attention, convolution, scan, pooling) respect the
//! boundaries.

use std::sync::Arc;

use super::float::Float;
use super::matrix::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Row ranges of packed sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &l in lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        Segments { offsets }
    }

    /// A single segment covering `len` rows.
    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.count()).map(|i| self.len_of(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.count()).map(move |i| self.range(i))
    }

    /// Row permutation that reverses every segment in place.
    pub fn reversal_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.total());
        for r in self.iter() {
            idx.extend(r.rev());
        }
        idx
    }
}

/// Backward rule of one recorded operation.
pub(crate) trait Op<T: Float> {
    fn inputs(&self) -> Vec<Var>;
    /// Gradients for each input listed by [`Op::inputs`]; `None` where
    /// `needs[i]` is false.
    fn backward(
        &self,
        g: &Graph<T>,
        out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>>;
}

struct Node<T: Float> {
    value: Matrix<T>,
    op: Option<Box<dyn Op<T>>>,
    needs_grad: bool,
}

/// The tape.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by variable.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward rules; for inference.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        let needs = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: None,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub(crate) fn push(&mut self, value: Matrix<T>, op: impl Op<T> + 'static) -> Var {
        let needs = self.grad_enabled && op.inputs().iter().any(|&i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: if needs { Some(Box::new(op)) } else { None },
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(dout) = grads[i].take() else {
                continue;
            };
            let inputs = op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let input_grads = op.backward(self, &node.value, &dout, &needs);
            for ((v, gi), need) in inputs.into_iter().zip(input_grads).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(gi) = gi {
                    debug_assert_eq!(gi.shape(), self.shape(v), "gradient shape mismatch");
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&gi),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Products

struct MatMulOp {
    a: Var,
    b: Var,
}

impl<T: Float> Op<T> for MatMulOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let (a, b) = (g.value(self.a), g.value(self.b));
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let da = needs[0].then(|| {
            let mut da = Matrix::zeros(m, k);
            matmul_nt_acc(&dout.data, &b.data, &mut da.data, m, n, k);
            da
        });
        let db = needs[1].then(|| {
            let mut db = Matrix::zeros(k, n);
            matmul_tn_acc(&a.data, &dout.data, &mut db.data, m, k, n);
            db
        });
        vec![da, db]
    }
}

struct MatMulNtOp {
    a: Var,
    b: Var,
}

impl<T: Float> Op<T> for MatMulNtOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let (a, b) = (g.value(self.a), g.value(self.b));
        let (m, k, n) = (a.rows, a.cols, b.rows);
        let da = needs[0].then(|| {
            let mut da = Matrix::zeros(m, k);
            matmul_acc(&dout.data, &b.data, &mut da.data, m, n, k);
            da
        });
        let db = needs[1].then(|| {
            let mut db = Matrix::zeros(n, k);
            matmul_tn_acc(&dout.data, &a.data, &mut db.data, m, n, k);
            db
        });
        vec![da, db]
    }
}

// ---------------------------------------------------------------------------
// Elementwise

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    a: Var,
    b: Var,
    kind: Binary,
}

impl<T: Float> Op<T> for BinaryOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        match self.kind {
            Binary::Add => vec![
                needs[0].then(|| dout.clone()),
                needs[1].then(|| dout.clone()),
            ],
            Binary::Sub => vec![
                needs[0].then(|| dout.clone()),
                needs[1].then(|| map(dout, |x| -x)),
            ],
            Binary::Mul => {
                let (a, b) = (g.value(self.a), g.value(self.b));
                vec![
                    needs[0].then(|| zip(dout, b, |d, y| d * y)),
                    needs[1].then(|| zip(dout, a, |d, x| d * x)),
                ]
            }
        }
    }
}

/// Broadcasts a `1 x n` row over every row of `x`.
struct RowOp {
    x: Var,
    row: Var,
    mul: bool,
}

impl<T: Float> Op<T> for RowOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.row]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let n = dout.cols;
        if !self.mul {
            let dr = needs[1].then(|| {
                let mut dr = Matrix::zeros(1, n);
                for r in 0..dout.rows {
                    for (acc, &d) in dr.data.iter_mut().zip(dout.row(r)) {
                        *acc += d;
                    }
                }
                dr
            });
            return vec![needs[0].then(|| dout.clone()), dr];
        }
        let x = g.value(self.x);
        let row = g.value(self.row);
        let dx = needs[0].then(|| {
            let mut dx = dout.clone();
            for r in 0..dx.rows {
                for (d, &s) in dx.row_mut(r).iter_mut().zip(&row.data) {
                    *d *= s;
                }
            }
            dx
        });
        let dr = needs[1].then(|| {
            let mut dr = Matrix::zeros(1, n);
            for r in 0..dout.rows {
                for ((acc, &d), &xv) in dr.data.iter_mut().zip(dout.row(r)).zip(x.row(r)) {
                    *acc += d * xv;
                }
            }
            dr
        });
        vec![dx, dr]
    }
}

struct ScaleOp<T> {
    x: Var,
    c: T,
}

impl<T: Float> Op<T> for ScaleOp<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(
        &self,
        _g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let c = self.c;
        vec![Some(map(dout, |d| d * c))]
    }
}

struct MulConstOp<T> {
    x: Var,
    c: Arc<Matrix<T>>,
}

impl<T: Float> Op<T> for MulConstOp<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(
        &self,
        _g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        vec![Some(zip(dout, &self.c, |d, c| d * c))]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Swish,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }
}

impl Unary {
    fn apply<T: Float>(self, x: T) -> T {
        match self {
            Unary::Swish => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    fn derivative<T: Float>(self, x: T, y: T) -> T {
        match self {
            Unary::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => T::one() / x,
            Unary::Square => x + x,
        }
    }
}

struct UnaryOp {
    x: Var,
    kind: Unary,
}

impl<T: Float> Op<T> for UnaryOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let x = g.value(self.x);
        let kind = self.kind;
        let mut dx = dout.clone();
        for ((d, &xv), &yv) in dx.data.iter_mut().zip(&x.data).zip(&out.data) {
            *d *= kind.derivative(xv, yv);
        }
        vec![Some(dx)]
    }
}

struct SumOp {
    x: Var,
}

impl<T: Float> Op<T> for SumOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let (r, c) = g.shape(self.x);
        vec![Some(Matrix::filled(r, c, dout.data[0]))]
    }
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormKind {
    Layer,
    Rms,
}

/// Row-wise layer or RMS normalization with a learned gain (and bias).
struct RowNormOp<T> {
    x: Var,
    gain: Var,
    bias: Option<Var>,
    kind: NormKind,
    mean: Vec<T>,
    inv: Vec<T>,
}

impl<T: Float> Op<T> for RowNormOp<T> {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.gain];
        v.extend(self.bias);
        v
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let x = g.value(self.x);
        let gain = &g.value(self.gain).data;
        let (rows, cols) = x.shape();
        let nf = T::lit(cols as f64);
        let mut dx = needs[0].then(|| Matrix::zeros(rows, cols));
        let mut dgain = Matrix::zeros(1, cols);
        let mut dbias = Matrix::zeros(1, cols);
        let mut xhat = vec![T::zero(); cols];
        let mut dxh = vec![T::zero(); cols];
        for r in 0..rows {
            let xr = x.row(r);
            let dr = dout.row(r);
            for c in 0..cols {
                xhat[c] = (xr[c] - self.mean[r]) * self.inv[r];
                dxh[c] = dr[c] * gain[c];
                dgain.data[c] += dr[c] * xhat[c];
                dbias.data[c] += dr[c];
            }
            if let Some(dx) = dx.as_mut() {
                let m_dxh = if self.kind == NormKind::Layer {
                    dxh.iter().copied().sum::<T>() / nf
                } else {
                    T::zero()
                };
                let m_dxh_xh = dot(&dxh, &xhat) / nf;
                let out = dx.row_mut(r);
                for c in 0..cols {
                    out[c] = self.inv[r] * (dxh[c] - m_dxh - xhat[c] * m_dxh_xh);
                }
            }
        }
        let mut res = vec![dx, needs[1].then_some(dgain)];
        if self.bias.is_some() {
            res.push(needs[2].then_some(dbias));
        }
        res
    }
}

/// Column-wise batch normalization in training mode.
struct BatchNormOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    inv: Vec<T>,
}

impl<T: Float> Op<T> for BatchNormOp<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let x = g.value(self.x);
        let gamma = &g.value(self.gamma).data;
        let (rows, cols) = x.shape();
        let nf = T::lit(rows as f64);
        let mut dgamma = Matrix::zeros(1, cols);
        let mut dbeta = Matrix::zeros(1, cols);
        let mut s_dxh = vec![T::zero(); cols];
        let mut s_dxh_xh = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                let xh = (x.at(r, c) - self.mean[c]) * self.inv[c];
                let d = dout.at(r, c);
                dgamma.data[c] += d * xh;
                dbeta.data[c] += d;
                let dxh = d * gamma[c];
                s_dxh[c] += dxh;
                s_dxh_xh[c] += dxh * xh;
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let xh = (x.at(r, c) - self.mean[c]) * self.inv[c];
                    let dxh = dout.at(r, c) * gamma[c];
                    dx.set(
                        r,
                        c,
                        self.inv[c] * (dxh - s_dxh[c] / nf - xh * s_dxh_xh[c] / nf),
                    );
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

// ---------------------------------------------------------------------------
// Structural

struct SliceColsOp {
    x: Var,
    start: usize,
}

impl<T: Float> Op<T> for SliceColsOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let (rows, cols) = g.shape(self.x);
        let mut dx = Matrix::zeros(rows, cols);
        for r in 0..rows {
            dx.row_mut(r)[self.start..self.start + dout.cols].copy_from_slice(dout.row(r));
        }
        vec![Some(dx)]
    }
}

struct ConcatColsOp {
    parts: Vec<Var>,
}

impl<T: Float> Op<T> for ConcatColsOp {
    fn inputs(&self) -> Vec<Var> {
        self.parts.clone()
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let mut start = 0;
        let mut res = Vec::with_capacity(self.parts.len());
        for (p, &need) in self.parts.iter().zip(needs) {
            let (rows, cols) = g.shape(*p);
            res.push(need.then(|| {
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)
                        .copy_from_slice(&dout.row(r)[start..start + cols]);
                }
                d
            }));
            start += cols;
        }
        res
    }
}

struct ConcatRowsOp {
    parts: Vec<Var>,
}

impl<T: Float> Op<T> for ConcatRowsOp {
    fn inputs(&self) -> Vec<Var> {
        self.parts.clone()
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let mut start = 0;
        let mut res = Vec::with_capacity(self.parts.len());
        for (p, &need) in self.parts.iter().zip(needs) {
            let (rows, cols) = g.shape(*p);
            res.push(need.then(|| {
                Matrix::from_vec(
                    rows,
                    cols,
                    dout.data[start * cols..(start + rows) * cols].to_vec(),
                )
            }));
            start += rows;
        }
        res
    }
}

struct GatherRowsOp {
    x: Var,
    idx: Arc<Vec<usize>>,
}

impl<T: Float> Op<T> for GatherRowsOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let (rows, cols) = g.shape(self.x);
        let mut dx = Matrix::zeros(rows, cols);
        for (r, &src) in self.idx.iter().enumerate() {
            for (a, &d) in dx.row_mut(src).iter_mut().zip(dout.row(r)) {
                *a += d;
            }
        }
        vec![Some(dx)]
    }
}

struct MeanSegmentsOp {
    x: Var,
    segs: Arc<Segments>,
}

impl<T: Float> Op<T> for MeanSegmentsOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let (rows, cols) = g.shape(self.x);
        let mut dx = Matrix::zeros(rows, cols);
        for (s, range) in self.segs.iter().enumerate() {
            let inv = T::one() / T::lit(range.len() as f64);
            for r in range {
                for (a, &d) in dx.row_mut(r).iter_mut().zip(dout.row(s)) {
                    *a = d * inv;
                }
            }
        }
        vec![Some(dx)]
    }
}

fn map<T: Float>(m: &Matrix<T>, f: impl Fn(T) -> T) -> Matrix<T> {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip<T: Float>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Public operation surface

impl<T: Float> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::contract(format!("matmul: {m}x{k} times {k2}x{n}")));
        }
        let mut c = Matrix::zeros(m, n);
        matmul_acc(
            &self.value(a).data,
            &self.value(b).data,
            &mut c.data,
            m,
            k,
            n,
        );
        Ok(self.push(c, MatMulOp { a, b }))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul_nt: {m}x{k} times ({n}x{k2})^T"
            )));
        }
        let mut c = Matrix::zeros(m, n);
        matmul_nt_acc(
            &self.value(a).data,
            &self.value(b).data,
            &mut c.data,
            m,
            k,
            n,
        );
        Ok(self.push(c, MatMulNtOp { a, b }))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        self.check_same(a, b, "elementwise op")?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = zip(self.value(a), self.value(b), f);
        Ok(self.push(out, BinaryOp { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn row_op(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(row) != (1, cols) {
            return Err(Error::contract(format!(
                "row broadcast: expected 1x{cols}, got {:?}",
                self.shape(row)
            )));
        }
        let mut out = self.value(x).clone();
        let rv = self.value(row).data.clone();
        for r in 0..rows {
            for (o, &s) in out.row_mut(r).iter_mut().zip(&rv) {
                if mul {
                    *o *= s;
                } else {
                    *o += s;
                }
            }
        }
        Ok(self.push(out, RowOp { x, row, mul }))
    }

    /// `x + row` with the `1 x n` row broadcast over all rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, false)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, true)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = map(self.value(x), |v| v * c);
        self.push(out, ScaleOp { x, c })
    }

    /// Elementwise product with a constant matrix (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: Arc<Matrix<T>>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::contract("mul_const: shape mismatch"));
        }
        let out = zip(self.value(x), &c, |a, b| a * b);
        Ok(self.push(out, MulConstOp { x, c }))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = map(self.value(x), |v| kind.apply(v));
        self.push(out, UnaryOp { x, kind })
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Swish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Sum of all entries as a `1 x 1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        self.push(Matrix::scalar(s), SumOp { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    fn row_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Option<Var>,
        eps: T,
        kind: NormKind,
    ) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (1, cols) || bias.is_some_and(|b| self.shape(b) != (1, cols)) {
            return Err(Error::contract("normalization gain/bias must be 1 x width"));
        }
        let nf = T::lit(cols as f64);
        let xm = self.value(x);
        let g = &self.value(gain).data;
        let b = bias.map(|b| self.value(b).data.clone());
        let mut out = Matrix::zeros(rows, cols);
        let mut means = vec![T::zero(); rows];
        let mut invs = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = xm.row(r);
            let mean = if kind == NormKind::Layer {
                xr.iter().copied().sum::<T>() / nf
            } else {
                T::zero()
            };
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = (xr[c] - mean) * inv * g[c] + b.as_ref().map_or(T::zero(), |b| b[c]);
            }
            means[r] = mean;
            invs[r] = inv;
        }
        Ok(self.push(
            out,
            RowNormOp {
                x,
                gain,
                bias,
                kind,
                mean: means,
                inv: invs,
            },
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.row_norm(x, gain, Some(bias), eps, NormKind::Layer)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        self.row_norm(x, gain, None, eps, NormKind::Rms)
    }

    /// Training-mode batch normalization; returns the output and the batch
    /// mean and (biased) variance per column.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (rows, cols) = self.shape(x);
        if rows < 2 {
            return Err(Error::contract(
                "batch normalization needs at least two rows",
            ));
        }
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(Error::contract("batch norm gamma/beta must be 1 x width"));
        }
        let nf = T::lit(rows as f64);
        let xm = self.value(x);
        let mut mean = vec![T::zero(); cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(xm.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); cols];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(xm.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= nf);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = (xm.at(r, c) - mean[c]) * inv[c] * gm[c] + bt[c];
            }
        }
        let v = self.push(
            out,
            BatchNormOp {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv,
            },
        );
        Ok((v, mean, var))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::contract(format!(
                "slice_cols {start}+{len} exceeds width {cols}"
            )));
        }
        let xm = self.value(x);
        let mut out = Matrix::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r)
                .copy_from_slice(&xm.row(r)[start..start + len]);
        }
        Ok(self.push(out, SliceColsOp { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::contract("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut start = 0;
        for &p in parts {
            let pm = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[start..start + pm.cols].copy_from_slice(pm.row(r));
            }
            start += pm.cols;
        }
        Ok(self.push(
            out,
            ConcatColsOp {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::contract("concat_rows: widths differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let rows = data.len() / cols.max(1);
        Ok(self.push(
            Matrix::from_vec(rows, cols, data),
            ConcatRowsOp {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row `r` of the output is row `idx[r]` of `x` (embedding lookup,
    /// token selection, segment reversal).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let xm = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(xm.row(i));
        }
        Ok(self.push(
            Matrix::from_vec(idx.len(), cols, data),
            GatherRowsOp { x, idx },
        ))
    }

    pub fn reverse_segments(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        self.gather_rows(x, Arc::new(segs.reversal_index()))
    }

    /// Per-segment arithmetic mean; one output row per segment.
    pub fn mean_segments(&mut self, x: Var, segs: Arc<Segments>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if segs.total() != rows {
            return Err(Error::contract(
                "mean_segments: segments do not cover the input",
            ));
        }
        if (0..segs.count()).any(|i| segs.len_of(i) == 0) {
            return Err(Error::contract("mean pooling over an empty sequence"));
        }
        let xm = self.value(x);
        let mut out = Matrix::zeros(segs.count(), cols);
        for (s, range) in segs.iter().enumerate() {
            let inv = T::one() / T::lit(range.len() as f64);
            let o = out.row_mut(s);
            for r in range {
                for (a, &v) in o.iter_mut().zip(xm.row(r)) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        Ok(self.push(out, MeanSegmentsOp { x, segs }))
    }

    /// `x * w + b` with `w: in x out` and `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let sq = g.square(p);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        assert_eq!(g.scalar(loss), 12.5);
        let grads = g.backward(loss);
        assert_eq!(grads.get(p).unwrap().data, vec![3.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Matrix::from_vec(1, 1, vec![2.0]));
        let q = g.param(Matrix::from_vec(1, 1, vec![5.0]));
        let loss = g.square(p);
        let grads = g.backward(loss);
        assert_eq!(grads.get(p).unwrap().data, vec![4.0]);
        assert!(grads.get(q).is_none());
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Matrix::from_vec(1, 1, vec![3.0]));
        let y = g.mul(p, p).unwrap();
        let z = g.add(y, p).unwrap();
        let grads = g.backward(z);
        assert_eq!(grads.get(p).unwrap().data, vec![7.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut g = Graph::<f32>::no_grad();
        let p = g.param(Matrix::from_vec(1, 1, vec![3.0]));
        let y = g.square(p);
        assert!(!g.needs_grad(y));
        assert!(g.backward(y).get(p).is_none());
    }

    #[test]
    fn reversal_index_reverses_each_segment() {
        let s = Segments::from_lengths(&[3, 0, 2]);
        assert_eq!(s.reversal_index(), vec![2, 1, 0, 4, 3]);
    }

    #[test]
    fn pooling_empty_segment_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::zeros(2, 3));
        assert!(g
            .mean_segments(x, Arc::new(Segments::from_lengths(&[2, 0])))
            .is_err());
    }
}
