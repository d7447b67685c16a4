//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation eagerly: values are computed when the
//! node is created, and [`Tape::backward`] walks the record in reverse to
//! accumulate gradients into the parameters of a [`ParamStore`]. Nodes that do
//! not depend on any parameter are never visited during the backward pass, so
//! [`Tape::detach`] severs gradient flow exactly.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, Matrix, Operand};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Gradients of a scalar with respect to every parameter used on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.iter().map(|(_, g)| g.sum_squares()).sum())
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|g| g.scale_assign(s));
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.all_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowCombine(Var, Vec<(u32, u32, f64)>),
    ScatterCols(Var, Vec<(u32, u32, u32)>),
    Pick(Var, Vec<(u32, u32)>),
    Softmax(Var),
    LogSoftmax(Var),
    RowDot(Var, Var, usize),
    RowMix(Var, Var),
    Blend(Var, Var, Vec<bool>),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise softmax; entries with `mask == false` get probability zero. A row
/// with no admissible entry is all zeros.
pub fn softmax_rows(x: &Matrix, mask: Option<&[bool]>) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = x.row(r);
        let keep = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if keep(c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..cols {
            if keep(c) {
                let e = libm::exp(row[c] - max);
                o[c] = e;
                total += e;
            }
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        out.row_mut(r).iter_mut().zip(row).for_each(|(o, &v)| *o = v - lse);
    }
    out
}

/// Operation record with eagerly evaluated values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.idx()].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var((self.nodes.len() - 1) as u32)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.idx()].needs_grad)
    }

    /// A constant with no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// The current value of a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + b` with `b` a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(y.rows(), 1);
        assert_eq!(x.cols(), y.cols());
        let mut value = x.clone();
        for r in 0..value.rows() {
            value.row_mut(r).iter_mut().zip(y.data()).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(&[a, b]);
        self.push(value, Op::AddRow(a, b), ng)
    }

    /// `a * c` with `c` a single column broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (x, y) = (self.value(a), self.value(c));
        assert_eq!(y.cols(), 1);
        assert_eq!(x.rows(), y.rows());
        let mut value = x.clone();
        for r in 0..value.rows() {
            let s = y.data()[r];
            value.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        let ng = self.ng(&[a, c]);
        self.push(value, Op::MulCol(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Shift(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::exp);
        let ng = self.ng(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::log);
        let ng = self.ng(&[a]);
        self.push(value, Op::Log(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.cols());
        let mut value = Matrix::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + x.cols()].copy_from_slice(x.row(r));
            }
            off += x.cols();
        }
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(x.data());
        }
        let rows = data.len() / cols.max(1);
        let value = Matrix::from_vec(rows, cols, data);
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `out[o] += w * a[i]` for every `(o, i, w)`; output has `out_rows` rows.
    pub fn row_combine(&mut self, a: Var, out_rows: usize, entries: Vec<(u32, u32, f64)>) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(out_rows, x.cols());
        for &(o, i, w) in &entries {
            let src = x.row(i as usize);
            value.row_mut(o as usize).iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::RowCombine(a, entries), ng)
    }

    /// Row lookup (embedding gather).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let entries = rows.iter().enumerate().map(|(o, &i)| (o as u32, i as u32, 1.0)).collect();
        self.row_combine(a, rows.len(), entries)
    }

    /// `out[r][oc] += a[r][ic]` for every `(r, ic, oc)`; output is `rows(a) x out_cols`.
    pub fn scatter_cols(&mut self, a: Var, out_cols: usize, entries: Vec<(u32, u32, u32)>) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), out_cols);
        for &(r, ic, oc) in &entries {
            let v = x.get(r as usize, ic as usize);
            value.data_mut()[r as usize * out_cols + oc as usize] += v;
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::ScatterCols(a, entries), ng)
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn pick(&mut self, a: Var, at: Vec<(u32, u32)>) -> Var {
        let x = self.value(a);
        let data = at.iter().map(|&(r, c)| x.get(r as usize, c as usize)).collect::<Vec<_>>();
        let value = Matrix::from_vec(at.len(), 1, data);
        let ng = self.ng(&[a]);
        self.push(value, Op::Pick(a, at), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a), None);
        let ng = self.ng(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row softmax restricted to entries where `mask` is true (row-major, same shape as `a`).
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        assert_eq!(mask.len(), self.value(a).len());
        let value = softmax_rows(self.value(a), Some(mask));
        let ng = self.ng(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.ng(&[a]);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Batched dot products: `out[b][j] = q[b] . mem[b * slots + j]`.
    pub fn row_dot(&mut self, q: Var, mem: Var, slots: usize) -> Var {
        let (qv, mv) = (self.value(q), self.value(mem));
        let batch = qv.rows();
        assert_eq!(mv.rows(), batch * slots);
        assert_eq!(qv.cols(), mv.cols());
        let mut value = Matrix::zeros(batch, slots);
        for b in 0..batch {
            let qr = qv.row(b);
            for j in 0..slots {
                let s = qr.iter().zip(mv.row(b * slots + j)).map(|(x, y)| x * y).sum();
                value.set(b, j, s);
            }
        }
        let ng = self.ng(&[q, mem]);
        self.push(value, Op::RowDot(q, mem, slots), ng)
    }

    /// Batched mixtures: `out[b] = sum_j w[b][j] * mem[b * slots + j]`.
    pub fn row_mix(&mut self, w: Var, mem: Var) -> Var {
        let (wv, mv) = (self.value(w), self.value(mem));
        let (batch, slots) = wv.shape();
        assert_eq!(mv.rows(), batch * slots);
        let mut value = Matrix::zeros(batch, mv.cols());
        for b in 0..batch {
            for j in 0..slots {
                let a = wv.get(b, j);
                if a != 0.0 {
                    let src = mv.row(b * slots + j);
                    value.row_mut(b).iter_mut().zip(src).for_each(|(o, s)| *o += a * s);
                }
            }
        }
        let ng = self.ng(&[w, mem]);
        self.push(value, Op::RowMix(w, mem), ng)
    }

    /// Row `r` of the output is row `r` of `a` where `take_a[r]`, else of `b`.
    pub fn blend(&mut self, a: Var, b: Var, take_a: Vec<bool>) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        assert_eq!(take_a.len(), x.rows());
        let mut value = y.clone();
        for (r, &t) in take_a.iter().enumerate() {
            if t {
                value.row_mut(r).copy_from_slice(x.row(r));
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Blend(a, b, take_a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    /// Gradients of the scalar `out` with respect to all parameters on the tape.
    pub fn backward(&self, out: Var, n_params: usize) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[out.idx()] = Some(Matrix::scalar(1.0));
        let mut param_grads: Vec<Option<Matrix>> = vec![None; n_params];

        for idx in (0..=out.idx()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut param_grads);
        }
        Gradients { grads: param_grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> Option<&'g mut Matrix> {
        let node = &self.nodes[v.idx()];
        if !node.needs_grad {
            return None;
        }
        let (r, c) = node.value.shape();
        Some(grads[v.idx()].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>], params: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match &mut params[id.0] {
                Some(p) => p.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            },
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(Operand::plain(g), Operand::t(bv), ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(Operand::t(av), Operand::plain(g), gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.data_mut().iter_mut().zip(g.data()).for_each(|(o, d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, d), q) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += d * q;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, d), p) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += d * p;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..g.rows() {
                        gb.data_mut().iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..g.rows() {
                        let s = cv.data()[r];
                        ga.row_mut(r).iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d * s);
                    }
                }
                if let Some(gc) = self.acc(grads, *c) {
                    for r in 0..g.rows() {
                        gc.data_mut()[r] += g.row(r).iter().zip(av.row(r)).map(|(d, x)| d * x).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.data_mut().iter_mut().zip(g.data()).for_each(|(o, d)| *o += d * s);
                }
            }
            Op::Shift(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, d), s) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += d * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, d), t) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += d * (1.0 - t * t);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, d), e) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += d * e;
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, d), x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += d / x;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let w = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..g.rows() {
                            gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]).for_each(|(o, d)| *o += d);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.data_mut().iter_mut().zip(&g.data()[off..off + n]).for_each(|(o, d)| *o += d);
                    }
                    off += n;
                }
            }
            Op::RowCombine(a, entries) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for &(o, i, w) in entries {
                        let src = g.row(o as usize);
                        ga.row_mut(i as usize).iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
                    }
                }
            }
            Op::ScatterCols(a, entries) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for &(r, ic, oc) in entries {
                        let d = g.get(r as usize, oc as usize);
                        let cols = ga.cols();
                        ga.data_mut()[r as usize * cols + ic as usize] += d;
                    }
                }
            }
            Op::Pick(a, at) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &(r, c)) in at.iter().enumerate() {
                        let cols = ga.cols();
                        ga.data_mut()[r as usize * cols + c as usize] += g.data()[k];
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(d, p)| d * p).sum();
                        ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)).for_each(|(o, (d, p))| *o += p * (d - dot));
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let total: f64 = gr.iter().sum();
                        ga.row_mut(r)
                            .iter_mut()
                            .zip(gr.iter().zip(yr))
                            .for_each(|(o, (d, lp))| *o += d - libm::exp(*lp) * total);
                    }
                }
            }
            Op::RowDot(q, mem, slots) => {
                let (qv, mv) = (self.value(*q), self.value(*mem));
                if let Some(gq) = self.acc(grads, *q) {
                    for b in 0..g.rows() {
                        for j in 0..*slots {
                            let d = g.get(b, j);
                            let src = mv.row(b * slots + j);
                            gq.row_mut(b).iter_mut().zip(src).for_each(|(o, m)| *o += d * m);
                        }
                    }
                }
                if let Some(gm) = self.acc(grads, *mem) {
                    for b in 0..g.rows() {
                        for j in 0..*slots {
                            let d = g.get(b, j);
                            gm.row_mut(b * slots + j).iter_mut().zip(qv.row(b)).for_each(|(o, x)| *o += d * x);
                        }
                    }
                }
            }
            Op::RowMix(w, mem) => {
                let (wv, mv) = (self.value(*w), self.value(*mem));
                let slots = wv.cols();
                if let Some(gw) = self.acc(grads, *w) {
                    for b in 0..wv.rows() {
                        for j in 0..slots {
                            let s: f64 = g.row(b).iter().zip(mv.row(b * slots + j)).map(|(d, m)| d * m).sum();
                            gw.data_mut()[b * slots + j] += s;
                        }
                    }
                }
                if let Some(gm) = self.acc(grads, *mem) {
                    for b in 0..wv.rows() {
                        for j in 0..slots {
                            let a = wv.get(b, j);
                            gm.row_mut(b * slots + j).iter_mut().zip(g.row(b)).for_each(|(o, d)| *o += a * d);
                        }
                    }
                }
            }
            Op::Blend(a, b, take_a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, _) in take_a.iter().enumerate().filter(|(_, &t)| t) {
                        ga.row_mut(r).iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (r, _) in take_a.iter().enumerate().filter(|(_, &t)| !t) {
                        gb.row_mut(r).iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::Sum(a) => {
                let d = g.item();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|o| *o += d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every parameter entry of a small graph.
    fn check(store: &mut ParamStore, f: &dyn Fn(&mut Tape, &ParamStore) -> Var) {
        let mut tape = Tape::new();
        let out = f(&mut tape, store);
        let grads = tape.backward(out, store.len());
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let mut t = Tape::new();
                let o = f(&mut t, store);
                let plus = t.value(o).item();
                store.get_mut(id).data_mut()[k] = orig - h;
                let mut t = Tape::new();
                let o = f(&mut t, store);
                let minus = t.value(o).item();
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(err < 1e-5 || (numeric - analytic).abs() < 1e-9, "{} [{k}]: {analytic} vs {numeric}", store.name(id));
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", random(3, 4, &mut rng));
        let b = store.add("b", random(4, 2, &mut rng));
        let bias = store.add("bias", random(1, 2, &mut rng));
        let col = store.add("col", random(3, 1, &mut rng));
        check(&mut store, &|t, s| {
            let (a, b, bias, col) = (t.param(s, a), t.param(s, b), t.param(s, bias), t.param(s, col));
            let x = t.matmul(a, b);
            let x = t.add_row(x, bias);
            let x = t.mul_col(x, col);
            let y = t.tanh(x);
            let z = t.sigmoid(x);
            let w = t.mul(y, z);
            let e = t.exp(w);
            let e = t.shift(e, 0.5);
            let l = t.log(e);
            let d = t.sub(l, y);
            let d = t.scale(d, 1.7);
            t.sum(d)
        });
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let a = store.add("a", random(4, 3, &mut rng));
        let q = store.add("q", random(2, 3, &mut rng));
        check(&mut store, &|t, s| {
            let (a, q) = (t.param(s, a), t.param(s, q));
            let left = t.slice_cols(a, 0, 2);
            let right = t.slice_cols(a, 1, 3);
            let both = t.concat_cols(&[left, right]);
            let stacked = t.concat_rows(&[a, q]);
            let mem = t.gather_rows(stacked, &[0, 5, 2, 1, 4, 3]);
            let scores = t.row_dot(q, mem, 3);
            let mask = [true, true, false, true, true, true];
            let att = t.masked_softmax(scores, &mask);
            let ctx = t.row_mix(att, mem);
            let lsm = t.log_softmax(both);
            let sm = t.softmax(lsm);
            let picked = t.pick(sm, alloc::vec![(0, 1), (3, 3), (2, 0)]);
            let sc = t.scatter_cols(att, 5, alloc::vec![(0, 0, 4), (1, 2, 4), (1, 1, 0)]);
            let blended = t.blend(ctx, q, alloc::vec![true, false]);
            let comb = t.row_combine(a, 2, alloc::vec![(0, 1, 0.5), (1, 3, -2.0), (0, 2, 1.0)]);
            let m = t.mul(blended, comb);
            let parts = [t.sum(m), t.sum(picked), t.sum(sc)];
            let sq = t.mul(sc, sc);
            let all = t.concat_cols(&[parts[0], parts[1], parts[2]]);
            let s1 = t.sum(all);
            let s2 = t.sum(sq);
            let tot = t.add(s1, s2);
            tot
        });
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::from_vec(1, 2, alloc::vec![0.3, -0.2]));
        let mut t = Tape::new();
        let av = t.param(&store, a);
        let d = t.detach(av);
        let y = t.mul(d, d);
        let s = t.sum(y);
        let g = t.backward(s, store.len());
        assert!(g.get(a).is_none());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let x = Matrix::from_vec(2, 3, alloc::vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let y = softmax_rows(&x, Some(&[true, false, true, false, false, false]));
        assert_eq!(y.get(0, 1), 0.0);
        assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(y.row(1).iter().all(|&v| v == 0.0));
    }
}
