//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass.
//! [`Tape::backward`] walks the records in reverse and accumulates
//! gradients; [`Tape::accumulate_param_grads`] then adds the gradients of
//! parameter leaves into the owning [`ParameterStore`].
//!
//! Every primitive checks operand shapes and rejects non-finite outputs,
//! naming the offending op in the error.

use std::collections::HashMap;
use std::sync::Arc;

use super::mat::{gemm, Mat};
use super::params::{ParamId, ParameterStore};
use crate::error::{IcdmError, Result};

/// Lower/upper clamp applied to probabilities inside the BCE loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-sparse weighted aggregation: output row `r` is
/// `Σ weights[k] * x[cols[k]]` over `offsets[r]..offsets[r+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseRows {
    pub fn new(offsets: Vec<usize>, cols: Vec<usize>, weights: Vec<f64>) -> Self {
        assert_eq!(cols.len(), weights.len());
        assert_eq!(*offsets.last().unwrap_or(&0), cols.len());
        Self {
            offsets,
            cols,
            weights,
        }
    }

    /// Mean over each group; an empty group yields a zero row.
    pub fn mean_of_groups<G: AsRef<[usize]>>(groups: &[G]) -> Self {
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for g in groups {
            let g = g.as_ref();
            let w = if g.is_empty() { 0.0 } else { 1.0 / g.len() as f64 };
            cols.extend_from_slice(g);
            weights.extend(std::iter::repeat_n(w, g.len()));
            offsets.push(cols.len());
        }
        Self {
            offsets,
            cols,
            weights,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn max_col(&self) -> Option<usize> {
        self.cols.iter().copied().max()
    }

    fn apply(&self, x: &Mat) -> Mat {
        let d = x.cols();
        let mut out = Mat::zeros(self.n_rows(), d);
        for r in 0..self.n_rows() {
            let dst = out.row_mut(r);
            for k in self.offsets[r]..self.offsets[r + 1] {
                let w = self.weights[k];
                for (o, v) in dst.iter_mut().zip(x.row(self.cols[k])) {
                    *o += w * v;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Mat, out: &mut Mat) {
        for r in 0..self.n_rows() {
            let src = g.row(r);
            for k in self.offsets[r]..self.offsets[r + 1] {
                let w = self.weights[k];
                for (o, v) in out.row_mut(self.cols[k]).iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    GatherRows(Var, Arc<[usize]>),
    SpMM(Var, Arc<SparseRows>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    ScaleRowsByCol { x: Var, w: Var, col: usize },
    Bce(Var, Arc<[f64]>),
    SqNorm(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &str, msg: String) -> IcdmError {
    IcdmError::Usage(format!("{op}: {msg}"))
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Mat, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(IcdmError::Numeric {
                op: name,
                message: format!("non-finite output of shape {:?}", value.shape()),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Result<Var> {
        self.push("constant", value, Op::Constant, false)
    }

    /// A parameter leaf. Repeated calls for the same id return the same var.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_leaves.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param, true)?;
        self.param_leaves.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", format!("{:?} @ {:?}", av.shape(), bv.shape())));
        }
        let out = av.matmul(bv);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Mat::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    /// Adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", xv.shape(), rv.shape())));
        }
        let mut out = xv.clone();
        let r = rv.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push("add_row", out, Op::AddRow(x, row), ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push("hadamard", out, Op::Hadamard(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push("scale", out, Op::Scale(x, s), ng)
    }

    pub fn row_gather(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(shape_err("row_gather", format!("row {bad} of {}", xv.rows())));
        }
        let out = xv.gather_rows(&idx);
        let ng = self.needs(x);
        self.push("row_gather", out, Op::GatherRows(x, idx), ng)
    }

    /// Sparse weighted row aggregation.
    pub fn spmm(&mut self, x: Var, rows: impl Into<Arc<SparseRows>>) -> Result<Var> {
        let rows: Arc<SparseRows> = rows.into();
        let xv = self.value(x);
        if let Some(m) = rows.max_col() {
            if m >= xv.rows() {
                return Err(shape_err("spmm", format!("row {m} of {}", xv.rows())));
            }
        }
        let out = rows.apply(xv);
        let ng = self.needs(x);
        self.push("spmm", out, Op::SpMM(x, rows), ng)
    }

    /// Mean over groups of rows of `x`; empty groups give zero rows.
    pub fn segment_mean<G: AsRef<[usize]>>(&mut self, x: Var, groups: &[G]) -> Result<Var> {
        self.spmm(x, SparseRows::mean_of_groups(groups))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", format!("width {} vs {cols}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", format!("height {} vs {rows}", v.rows())));
            }
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push("tanh", out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push("sigmoid", out, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push("relu", out, Op::Relu(x), ng)
    }

    /// Softmax across the columns of every row (fixed arity = column count).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.needs(x);
        self.push("softmax_rows", out, Op::SoftmaxRows(x), ng)
    }

    /// `out[i, :] = x[i, :] * w[i, col]`.
    pub fn scale_rows_by_col(&mut self, x: Var, w: Var, col: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rows() != xv.rows() || col >= wv.cols() {
            return Err(shape_err(
                "scale_rows_by_col",
                format!("{:?} by column {col} of {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let s = wv.get(r, col);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.needs(x) || self.needs(w);
        self.push("scale_rows_by_col", out, Op::ScaleRowsByCol { x, w, col }, ng)
    }

    /// Summed binary cross-entropy of an n×1 probability column.
    pub fn bce_loss(&mut self, pred: Var, labels: impl Into<Arc<[f64]>>) -> Result<Var> {
        let labels: Arc<[f64]> = labels.into();
        let pv = self.value(pred);
        if pv.cols() != 1 || pv.rows() != labels.len() {
            return Err(shape_err(
                "bce_loss",
                format!("{:?} predictions for {} labels", pv.shape(), labels.len()),
            ));
        }
        let loss: f64 = pv
            .as_slice()
            .iter()
            .zip(labels.iter())
            .map(|(&p, &y)| bce(p, y))
            .sum();
        let ng = self.needs(pred);
        self.push("bce_loss", Mat::scalar(loss), Op::Bce(pred, labels), ng)
    }

    /// Sum of squared entries, as a 1×1 value.
    pub fn sq_norm(&mut self, x: Var) -> Result<Var> {
        let out = Mat::scalar(self.value(x).sq_norm());
        let ng = self.needs(x);
        self.push("sq_norm", out, Op::SqNorm(x), ng)
    }

    /// Reverse pass from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err("backward", "loss must be 1x1".into()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.needs(v) {
            return;
        }
        let shape = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| gemm(1.0, g, false, bv, true, 1.0, ga));
                self.acc(grads, *b, |gb| gemm(1.0, av, true, g, false, 1.0, gb));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| {
                    for (o, v) in gb.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o -= v;
                    }
                });
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, |gx| gx.add_assign(g));
                self.acc(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((o, gv), y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *o += gv * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gv), x) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, |gx| {
                    for (o, v) in gx.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += s * v;
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                self.acc(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SpMM(x, rows) => {
                self.acc(grads, *x, |gx| rows.apply_transpose(g, gx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |gp| {
                        for (o, v) in gp.as_mut_slice().iter_mut().zip(&g.as_slice()[off..off + n]) {
                            *o += v;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + c]) {
                                *o += v;
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, |gx| {
                    for ((o, gv), y) in gx.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |gx| {
                    for ((o, gv), y) in gx.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for ((o, gv), xi) in gx.as_mut_slice().iter_mut().zip(g.as_slice()).zip(xv.as_slice()) {
                        if *xi > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                self.acc(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yi), gi) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::ScaleRowsByCol { x, w, col } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.acc(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        let s = wv.get(r, *col);
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += s * v;
                        }
                    }
                });
                self.acc(grads, *w, |gw| {
                    for r in 0..g.rows() {
                        let d: f64 = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                        let cur = gw.get(r, *col);
                        gw.set(r, *col, cur + d);
                    }
                });
            }
            Op::Bce(pred, labels) => {
                let pv = self.value(*pred);
                let up = g.item();
                self.acc(grads, *pred, |gp| {
                    for ((o, &p), &y) in gp.as_mut_slice().iter_mut().zip(pv.as_slice()).zip(labels.iter()) {
                        *o += up * bce_grad(p, y);
                    }
                });
            }
            Op::SqNorm(x) => {
                let xv = self.value(*x);
                let up = g.item();
                self.acc(grads, *x, |gx| {
                    for (o, v) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        *o += 2.0 * up * v;
                    }
                });
            }
        }
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParameterStore) {
        for (&id, &v) in &self.param_leaves {
            if let Some(g) = grads.wrt(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Binary cross-entropy of one clamped prediction.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}
