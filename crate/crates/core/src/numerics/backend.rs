//! The primitive operation set shared by plain evaluation and the tape.
//!
//! Geometry, gating and task heads are written once against [`Backend`]. Run
//! on [`Eval`] they compute values only; run on [`Tape`](super::Tape) the same
//! code records a graph that can be differentiated.
//!
//! Binary elementwise ops broadcast an operand of length 1 against the other.

use std::ops::Range;

use super::params::{ParamId, ParamStore};

/// Elementwise unary functions available as primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sqrt,
    Exp,
    Log,
    Tan,
    Tanh,
    Atan,
    Atanh,
    Softplus,
    Relu,
    Sin,
    Cos,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tan => "tan",
            Unary::Tanh => "tanh",
            Unary::Atan => "arctan",
            Unary::Atanh => "artanh",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tan => x.tan(),
            Unary::Tanh => x.tanh(),
            Unary::Atan => x.atan(),
            Unary::Atanh => x.atanh(),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
        }
    }

    /// Derivative at input `x` given the forward output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sqrt => 0.5 / y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tan => 1.0 + y * y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::Atanh => 1.0 / (1.0 - x * x),
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
        }
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the entries listed in `active`; every other entry is exactly 0.
/// `None` means all entries are active.
pub fn masked_softmax(x: &[f64], active: Option<&[usize]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let all: Vec<usize>;
    let idx = match active {
        Some(a) => a,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &i in idx {
        let e = (x[i] - max).exp();
        out[i] = e;
        total += e;
    }
    for &i in idx {
        out[i] /= total;
    }
    out
}

pub(crate) fn broadcast_len(la: usize, lb: usize, op: &str) -> usize {
    if la == lb || lb == 1 {
        la
    } else if la == 1 {
        lb
    } else {
        panic!("{op}: incompatible lengths {la} and {lb}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    pub fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

pub(crate) fn binary_values(op: Binary, a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = broadcast_len(a.len(), b.len(), op.name());
    let ai = |i: usize| if a.len() == 1 { a[0] } else { a[i] };
    let bi = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
    (0..n).map(|i| op.apply(ai(i), bi(i))).collect()
}

/// Row-major `(m x k) * (k x n)`.
pub(crate) fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k, "matmul: lhs is not {m}x{k}");
    assert_eq!(b.len(), k * n, "matmul: rhs is not {k}x{n}");
    if n == 1 && k > 0 {
        return a.chunks_exact(k).map(|row| dot_values(row, b)).collect();
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn dot_values(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Primitive operations over dense `f64` arrays.
pub trait Backend {
    type V: Clone;

    /// A value that carries no gradient.
    fn constant(&mut self, data: Vec<f64>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a [f64];

    fn binary(&mut self, op: Binary, a: &Self::V, b: &Self::V) -> Self::V;
    fn unary(&mut self, op: Unary, a: &Self::V) -> Self::V;
    /// `a * k + s` for constants `k`, `s`.
    fn affine(&mut self, a: &Self::V, k: f64, s: f64) -> Self::V;
    fn dot(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn norm(&mut self, a: &Self::V) -> Self::V;
    /// Largest entry (first one on ties).
    fn max(&mut self, a: &Self::V) -> Self::V;
    fn softmax(&mut self, a: &Self::V, active: Option<&[usize]>) -> Self::V;
    fn matmul(&mut self, a: &Self::V, b: &Self::V, m: usize, k: usize, n: usize) -> Self::V;
    fn concat(&mut self, parts: &[Self::V]) -> Self::V;
    fn slice(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn gather(&mut self, a: &Self::V, idx: &[usize]) -> Self::V;
    /// Places `a[j]` at position `idx[j]` of a zero vector of length `len`.
    fn scatter(&mut self, a: &Self::V, idx: &[usize], len: usize) -> Self::V;

    fn scalar(&mut self, x: f64) -> Self::V {
        self.constant(vec![x])
    }
    fn len(&self, a: &Self::V) -> usize {
        self.value(a).len()
    }
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.binary(Binary::Add, a, b)
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.binary(Binary::Sub, a, b)
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.binary(Binary::Mul, a, b)
    }
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.binary(Binary::Div, a, b)
    }
    fn neg(&mut self, a: &Self::V) -> Self::V {
        self.affine(a, -1.0, 0.0)
    }
    fn scale(&mut self, a: &Self::V, k: f64) -> Self::V {
        self.affine(a, k, 0.0)
    }
    fn shift(&mut self, a: &Self::V, s: f64) -> Self::V {
        self.affine(a, 1.0, s)
    }
    fn square(&mut self, a: &Self::V) -> Self::V {
        self.mul(a, a)
    }
    fn sq_norm(&mut self, a: &Self::V) -> Self::V {
        self.dot(a, a)
    }
    fn sqrt(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Sqrt, a)
    }
    fn exp(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Exp, a)
    }
    fn log(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Log, a)
    }
    fn tan(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Tan, a)
    }
    fn tanh(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Tanh, a)
    }
    fn atan(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Atan, a)
    }
    fn atanh(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Atanh, a)
    }
    fn softplus(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Softplus, a)
    }
    fn relu(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Relu, a)
    }
    fn sin(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Sin, a)
    }
    fn cos(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Cos, a)
    }
    /// Row-major `(rows x cols)` matrix times a length-`cols` vector.
    fn matvec(&mut self, w: &Self::V, x: &Self::V, rows: usize, cols: usize) -> Self::V {
        self.matmul(w, x, rows, cols, 1)
    }
    /// Sum of a list of same-length values.
    fn add_all(&mut self, parts: &[Self::V]) -> Self::V {
        let mut acc = parts[0].clone();
        for p in &parts[1..] {
            acc = self.add(&acc, p);
        }
        acc
    }
}

/// A backend that can read parameters from a [`ParamStore`].
pub trait Bind: Backend {
    fn bind(&mut self, store: &ParamStore, id: ParamId) -> Self::V;
    fn bind_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Self::V;

    /// Several column ranges of one row. The default binds the row once.
    fn bind_row_slices(&mut self, store: &ParamStore, id: ParamId, row: usize, ranges: &[Range<usize>]) -> Vec<Self::V> {
        let full = self.bind_row(store, id, row);
        ranges.iter().map(|r| self.slice(&full, r.start, r.len())).collect()
    }
}

impl Bind for Eval {
    fn bind(&mut self, store: &ParamStore, id: ParamId) -> Vec<f64> {
        store.get(id).data.clone()
    }
    fn bind_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Vec<f64> {
        store.get(id).row(row).to_vec()
    }
    fn bind_row_slices(&mut self, store: &ParamStore, id: ParamId, row: usize, ranges: &[Range<usize>]) -> Vec<Vec<f64>> {
        let r = store.get(id).row(row);
        ranges.iter().map(|x| r[x.clone()].to_vec()).collect()
    }
}

/// Value-only backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type V = Vec<f64>;

    fn constant(&mut self, data: Vec<f64>) -> Vec<f64> {
        data
    }
    fn value<'a>(&'a self, v: &'a Vec<f64>) -> &'a [f64] {
        v
    }
    fn binary(&mut self, op: Binary, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        binary_values(op, a, b)
    }
    fn unary(&mut self, op: Unary, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|&x| op.apply(x)).collect()
    }
    fn affine(&mut self, a: &Vec<f64>, k: f64, s: f64) -> Vec<f64> {
        a.iter().map(|&x| x * k + s).collect()
    }
    fn dot(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        vec![dot_values(a, b)]
    }
    fn sum(&mut self, a: &Vec<f64>) -> Vec<f64> {
        vec![a.iter().sum()]
    }
    fn norm(&mut self, a: &Vec<f64>) -> Vec<f64> {
        vec![dot_values(a, a).sqrt()]
    }
    fn max(&mut self, a: &Vec<f64>) -> Vec<f64> {
        vec![a.iter().copied().fold(f64::NEG_INFINITY, f64::max)]
    }
    fn softmax(&mut self, a: &Vec<f64>, active: Option<&[usize]>) -> Vec<f64> {
        masked_softmax(a, active)
    }
    fn matmul(&mut self, a: &Vec<f64>, b: &Vec<f64>, m: usize, k: usize, n: usize) -> Vec<f64> {
        matmul_values(a, b, m, k, n)
    }
    fn concat(&mut self, parts: &[Vec<f64>]) -> Vec<f64> {
        parts.concat()
    }
    fn slice(&mut self, a: &Vec<f64>, start: usize, len: usize) -> Vec<f64> {
        a[start..start + len].to_vec()
    }
    fn gather(&mut self, a: &Vec<f64>, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| a[i]).collect()
    }
    fn scatter(&mut self, a: &Vec<f64>, idx: &[usize], len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (&i, &v) in idx.iter().zip(a) {
            out[i] += v;
        }
        out
    }
}
