//! Reverse-mode differentiation over dense arrays.
//!
//! Values live in one arena; each node records the primitive that produced it
//! and its parents. [`Tape::backward`] sweeps the nodes in reverse creation
//! order, which is a valid topological order because parents always precede
//! their children. Contributions from shared subexpressions are summed.

use std::collections::{BTreeMap, HashMap};

use super::backend::{
    binary_values, dot_values, masked_softmax, matmul_values, Backend, Binary, Bind, Unary,
};
use super::params::{ParamId, ParamStore};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Leaf,
    Param { id: ParamId, row: Option<usize> },
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Affine(usize, f64),
    Dot(usize, usize),
    Sum(usize),
    Norm(usize),
    Max { src: usize, arg: usize },
    Softmax(usize),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Gather(usize, Vec<usize>),
    Scatter(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "constant",
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::Binary(b, ..) => b.name(),
            Op::Unary(u, _) => u.name(),
            Op::Affine(..) => "affine",
            Op::Dot(..) => "dot",
            Op::Sum(_) => "sum",
            Op::Norm(_) => "norm",
            Op::Max { .. } => "max",
            Op::Softmax(_) => "softmax",
            Op::Matmul { .. } => "matmul",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather(..) => "gather",
            Op::Scatter(..) => "scatter",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    start: usize,
    len: usize,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    /// Whole parameters already on the tape; bound once per tape.
    bound: HashMap<ParamId, Var>,
    check_finite: bool,
    failure: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Finite checks are on in debug builds and off in release builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            vals: Vec::new(),
            bound: HashMap::new(),
            check_finite: cfg!(debug_assertions),
            failure: None,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Drops all nodes, keeping allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.bound.clear();
        self.failure = None;
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Name of the first primitive that produced a non-finite value, if any.
    pub fn failure(&self) -> Option<&'static str> {
        self.failure
    }

    /// A differentiable input that is not a stored parameter.
    pub fn var(&mut self, data: Vec<f64>) -> Var {
        self.push_owned(Op::Leaf, data, true)
    }

    /// All of parameter `id`, flattened. Repeated calls on one tape return
    /// the same node, so the store must not change while the tape is live.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let needs = p.trainable;
        let v = self.push_slice(Op::Param { id, row: None }, &p.data, needs);
        self.bound.insert(id, v);
        v
    }

    /// One leading-axis row of parameter `id`.
    pub fn param_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Var {
        let p = store.get(id);
        let needs = p.trainable;
        self.push_slice(Op::Param { id, row: Some(row) }, p.row(row), needs)
    }

    fn push_slice(&mut self, op: Op, data: &[f64], needs_grad: bool) -> Var {
        let start = self.vals.len();
        self.vals.extend_from_slice(data);
        self.finish(op, start, data.len(), needs_grad)
    }

    fn push_owned(&mut self, op: Op, data: Vec<f64>, needs_grad: bool) -> Var {
        let start = self.vals.len();
        let len = data.len();
        self.vals.extend(data);
        self.finish(op, start, len, needs_grad)
    }

    fn finish(&mut self, op: Op, start: usize, len: usize, needs_grad: bool) -> Var {
        if self.check_finite
            && self.failure.is_none()
            && self.vals[start..start + len].iter().any(|v| !v.is_finite())
        {
            self.failure = Some(op.name());
        }
        self.nodes.push(Node {
            op,
            start,
            len,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn vals_of(&self, i: usize) -> &[f64] {
        let n = &self.nodes[i];
        &self.vals[n.start..n.start + n.len]
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].needs_grad)
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Adjoints> {
        let root_node = &self.nodes[root.0];
        if root_node.len != 1 {
            return Err(contract(format!(
                "backward needs a scalar root, got length {}",
                root_node.len
            )));
        }
        if let Some(op) = self.failure {
            return Err(Error::Numeric { op });
        }
        let mut adj = vec![0.0f64; self.vals.len()];
        adj[root_node.start] = 1.0;
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lo, hi) = adj.split_at_mut(node.start);
            let g = &hi[..node.len];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            if self.check_finite && g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric { op: node.op.name() });
            }
            let out = &self.vals[node.start..node.start + node.len];
            self.propagate(&node.op, g, out, lo);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { id, row } if n.needs_grad => Some((id, row, i)),
                _ => None,
            })
            .collect();
        Ok(Adjoints {
            adj,
            spans: self.nodes.iter().map(|n| (n.start, n.len)).collect(),
            params,
        })
    }

    fn propagate(&self, op: &Op, g: &[f64], out: &[f64], lo: &mut [f64]) {
        let span = |i: usize| {
            let n = &self.nodes[i];
            n.start..n.start + n.len
        };
        let live = |i: usize| self.nodes[i].needs_grad;
        match *op {
            Op::Const | Op::Leaf | Op::Param { .. } => {}
            Op::Binary(kind, a, b) => {
                let av = self.vals_of(a);
                let bv = self.vals_of(b);
                let (la, lb) = (av.len(), bv.len());
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                let mut ga = vec![0.0; la];
                let mut gb = vec![0.0; lb];
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = (pick(av, i), pick(bv, i));
                    let (da, db) = match kind {
                        Binary::Add => (gi, gi),
                        Binary::Sub => (gi, -gi),
                        Binary::Mul => (gi * y, gi * x),
                        Binary::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[if la == 1 { 0 } else { i }] += da;
                    gb[if lb == 1 { 0 } else { i }] += db;
                }
                if live(a) {
                    add_into(&mut lo[span(a)], &ga);
                }
                if live(b) {
                    add_into(&mut lo[span(b)], &gb);
                }
            }
            Op::Unary(kind, a) => {
                let av = self.vals_of(a);
                let dst = &mut lo[span(a)];
                for i in 0..g.len() {
                    dst[i] += g[i] * kind.derivative(av[i], out[i]);
                }
            }
            Op::Affine(a, k) => {
                let dst = &mut lo[span(a)];
                for (d, gi) in dst.iter_mut().zip(g) {
                    *d += gi * k;
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.vals_of(a), self.vals_of(b));
                if live(a) {
                    for (d, y) in lo[span(a)].iter_mut().zip(bv) {
                        *d += g[0] * y;
                    }
                }
                if live(b) {
                    for (d, x) in lo[span(b)].iter_mut().zip(av) {
                        *d += g[0] * x;
                    }
                }
            }
            Op::Sum(a) => {
                for d in lo[span(a)].iter_mut() {
                    *d += g[0];
                }
            }
            Op::Norm(a) => {
                // Subgradient 0 at the origin.
                if out[0] > 0.0 {
                    let av = self.vals_of(a);
                    for (d, x) in lo[span(a)].iter_mut().zip(av) {
                        *d += g[0] * x / out[0];
                    }
                }
            }
            Op::Max { src, arg } => {
                lo[span(src)][arg] += g[0];
            }
            Op::Softmax(a) => {
                let s: f64 = g.iter().zip(out).map(|(gi, yi)| gi * yi).sum();
                let dst = &mut lo[span(a)];
                for i in 0..g.len() {
                    dst[i] += out[i] * (g[i] - s);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let av = self.vals_of(a);
                let bv = self.vals_of(b);
                if live(a) {
                    let dst = &mut lo[span(a)];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let drow = &mut dst[i * k..(i + 1) * k];
                        if n == 1 {
                            for (d, &bp) in drow.iter_mut().zip(bv) {
                                *d += gi[0] * bp;
                            }
                        } else {
                            for (p, d) in drow.iter_mut().enumerate() {
                                *d += dot_values(gi, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                if live(b) {
                    let dst = &mut lo[span(b)];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        if n == 1 {
                            for (d, &aip) in dst.iter_mut().zip(arow) {
                                *d += aip * gi[0];
                            }
                        } else {
                            for (p, &aip) in arow.iter().enumerate() {
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, &gij) in dst[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *d += aip * gij;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].len;
                    if live(p) {
                        add_into(&mut lo[span(p)], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Slice { src, start } => {
                let r = span(src);
                add_into(&mut lo[r.start + start..r.start + start + g.len()], g);
            }
            Op::Gather(src, ref idx) => {
                let dst = &mut lo[span(src)];
                for (gi, &i) in g.iter().zip(idx) {
                    dst[i] += gi;
                }
            }
            Op::Scatter(src, ref idx) => {
                let dst = &mut lo[span(src)];
                for (d, &i) in dst.iter_mut().zip(idx) {
                    *d += g[i];
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Backend for Tape {
    type V = Var;

    fn constant(&mut self, data: Vec<f64>) -> Var {
        self.push_owned(Op::Const, data, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a [f64] {
        self.vals_of(v.0)
    }

    fn binary(&mut self, op: Binary, a: &Var, b: &Var) -> Var {
        let data = binary_values(op, self.vals_of(a.0), self.vals_of(b.0));
        let needs = self.needs(&[a.0, b.0]);
        self.push_owned(Op::Binary(op, a.0, b.0), data, needs)
    }

    fn unary(&mut self, op: Unary, a: &Var) -> Var {
        let data = self.vals_of(a.0).iter().map(|&x| op.apply(x)).collect();
        let needs = self.needs(&[a.0]);
        self.push_owned(Op::Unary(op, a.0), data, needs)
    }

    fn affine(&mut self, a: &Var, k: f64, s: f64) -> Var {
        let data = self.vals_of(a.0).iter().map(|&x| x * k + s).collect();
        let needs = self.needs(&[a.0]);
        self.push_owned(Op::Affine(a.0, k), data, needs)
    }

    fn dot(&mut self, a: &Var, b: &Var) -> Var {
        let v = dot_values(self.vals_of(a.0), self.vals_of(b.0));
        let needs = self.needs(&[a.0, b.0]);
        self.push_owned(Op::Dot(a.0, b.0), vec![v], needs)
    }

    fn sum(&mut self, a: &Var) -> Var {
        let v = self.vals_of(a.0).iter().sum();
        let needs = self.needs(&[a.0]);
        self.push_owned(Op::Sum(a.0), vec![v], needs)
    }

    fn norm(&mut self, a: &Var) -> Var {
        let x = self.vals_of(a.0);
        let v = dot_values(x, x).sqrt();
        let needs = self.needs(&[a.0]);
        self.push_owned(Op::Norm(a.0), vec![v], needs)
    }

    fn max(&mut self, a: &Var) -> Var {
        let x = self.vals_of(a.0);
        let mut arg = 0;
        for (i, &v) in x.iter().enumerate() {
            if v > x[arg] {
                arg = i;
            }
        }
        let v = x[arg];
        let needs = self.needs(&[a.0]);
        self.push_owned(Op::Max { src: a.0, arg }, vec![v], needs)
    }

    fn softmax(&mut self, a: &Var, active: Option<&[usize]>) -> Var {
        let data = masked_softmax(self.vals_of(a.0), active);
        let needs = self.needs(&[a.0]);
        self.push_owned(Op::Softmax(a.0), data, needs)
    }

    fn matmul(&mut self, a: &Var, b: &Var, m: usize, k: usize, n: usize) -> Var {
        let data = matmul_values(self.vals_of(a.0), self.vals_of(b.0), m, k, n);
        let needs = self.needs(&[a.0, b.0]);
        self.push_owned(
            Op::Matmul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            data,
            needs,
        )
    }

    fn concat(&mut self, parts: &[Var]) -> Var {
        let start = self.vals.len();
        let mut needs = false;
        for p in parts {
            let n = &self.nodes[p.0];
            needs |= n.needs_grad;
            let (s, l) = (n.start, n.len);
            self.vals.extend_from_within(s..s + l);
        }
        let len = self.vals.len() - start;
        let ids = parts.iter().map(|p| p.0).collect();
        self.finish(Op::Concat(ids), start, len, needs)
    }

    fn slice(&mut self, a: &Var, start: usize, len: usize) -> Var {
        let n = &self.nodes[a.0];
        assert!(start + len <= n.len, "slice out of range");
        let (s, needs) = (n.start, n.needs_grad);
        let at = self.vals.len();
        self.vals.extend_from_within(s + start..s + start + len);
        self.finish(Op::Slice { src: a.0, start }, at, len, needs)
    }

    fn gather(&mut self, a: &Var, idx: &[usize]) -> Var {
        let x = self.vals_of(a.0);
        let data = idx.iter().map(|&i| x[i]).collect();
        let needs = self.needs(&[a.0]);
        self.push_owned(Op::Gather(a.0, idx.to_vec()), data, needs)
    }

    fn scatter(&mut self, a: &Var, idx: &[usize], len: usize) -> Var {
        let x = self.vals_of(a.0);
        let mut data = vec![0.0; len];
        for (&i, &v) in idx.iter().zip(x) {
            data[i] += v;
        }
        let needs = self.needs(&[a.0]);
        self.push_owned(Op::Scatter(a.0, idx.to_vec()), data, needs)
    }
}

impl Bind for Tape {
    fn bind(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param(store, id)
    }
    fn bind_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Var {
        self.param_row(store, id, row)
    }
}

/// Result of a reverse sweep: the adjoint of every node.
#[derive(Debug, Clone)]
pub struct Adjoints {
    adj: Vec<f64>,
    spans: Vec<(usize, usize)>,
    params: Vec<(ParamId, Option<usize>, usize)>,
}

impl Adjoints {
    /// d(root)/d(v).
    pub fn wrt(&self, v: Var) -> &[f64] {
        let (s, l) = self.spans[v.0];
        &self.adj[s..s + l]
    }

    /// Collects parameter gradients, summing repeated leaves of the same row.
    pub fn param_grads(&self) -> Gradients {
        let mut grads = Gradients::default();
        for &(id, row, node) in &self.params {
            let (s, l) = self.spans[node];
            let g = &self.adj[s..s + l];
            match row {
                Some(r) => grads.add_row(id, r, g),
                None => grads.add_dense(id, g),
            }
        }
        grads
    }
}

/// Gradient of one parameter: either the whole array or a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Parameter gradients keyed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<ParamId, GradBuf>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &GradBuf)> {
        self.entries.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, g: &[f64]) {
        match self.entries.entry(id).or_insert_with(|| GradBuf::Rows(BTreeMap::new())) {
            GradBuf::Rows(rows) => {
                let dst = rows.entry(row).or_insert_with(|| vec![0.0; g.len()]);
                add_into(dst, g);
            }
            GradBuf::Dense(d) => {
                let w = g.len();
                add_into(&mut d[row * w..(row + 1) * w], g);
            }
        }
    }

    pub fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        let entry = self.entries.remove(&id);
        let mut dense = match entry {
            None => vec![0.0; g.len()],
            Some(GradBuf::Dense(d)) => d,
            Some(GradBuf::Rows(rows)) => {
                let mut d = vec![0.0; g.len()];
                for (r, v) in rows {
                    let w = v.len();
                    add_into(&mut d[r * w..(r + 1) * w], &v);
                }
                d
            }
        };
        add_into(&mut dense, g);
        self.entries.insert(id, GradBuf::Dense(dense));
    }

    /// Adds every entry of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (&id, buf) in &other.entries {
            match buf {
                GradBuf::Dense(d) => self.add_dense(id, d),
                GradBuf::Rows(rows) => {
                    for (&r, v) in rows {
                        self.add_row(id, r, v);
                    }
                }
            }
        }
    }

    /// Gradient of `id` as a full row-major array (zeros where untouched).
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Vec<f64> {
        let p = store.get(id);
        match self.entries.get(&id) {
            None => vec![0.0; p.data.len()],
            Some(GradBuf::Dense(d)) => d.clone(),
            Some(GradBuf::Rows(rows)) => {
                let mut d = vec![0.0; p.data.len()];
                let w = p.row_len();
                for (&r, v) in rows {
                    add_into(&mut d[r * w..(r + 1) * w], v);
                }
                d
            }
        }
    }

    /// Every trainable parameter by name, zero arrays for unreachable ones.
    pub fn to_named(&self, store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (p.name.clone(), self.dense(store, id)))
            .collect()
    }
}

/// Backpropagates from `root` and returns d(root)/d(p) for every trainable
/// parameter of `store`.
pub fn forward_backward(
    tape: &Tape,
    root: Var,
    store: &ParamStore,
) -> Result<BTreeMap<String, Vec<f64>>> {
    Ok(tape.backward(root)?.param_grads().to_named(store))
}
