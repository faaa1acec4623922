//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse to accumulate
//! gradients into the trainable leaves. Parameters live in a [`ParamStore`]
//! that outlives any single graph; frozen parameters enter the tape as
//! constants so no gradient work is spent on them.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{dot, gemm_nn, gemm_nt, gemm_tn, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub const fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_values(&self, trainable_only: bool) -> usize {
        self.params.iter().filter(|p| !trainable_only || p.trainable).map(|p| p.value.len()).sum()
    }
}

static EMPTY_STORE: ParamStore = ParamStore::new();

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss did not
/// reach or that are frozen.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.grads.iter().flatten().map(|g| dot(g.data(), g.data())).sum())
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm(Var),
    L2Normalize(Var),
    CrossEntropy(Var, Vec<usize>),
    Focal(Var, Matrix, f64, f64),
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    aux: Vec<f64>,
}

/// A single-use tape. Build the forward pass with its methods, then call
/// [`Graph::backward`] on a scalar.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<usize, Var>,
    grad_enabled: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: BTreeMap::new(), grad_enabled: true }
    }

    /// Graph whose nodes never require gradients (inference).
    pub fn no_grad(store: &'s ParamStore) -> Self {
        Self { grad_enabled: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled, aux });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false, Vec::new())
    }

    /// Leaf bound to a stored parameter; created at most once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let trainable = self.store.is_trainable(id);
        let v = self.push(self.store.get(id).clone(), Op::Param(id), trainable, Vec::new());
        self.param_vars.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng, Vec::new())
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng, Vec::new())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng, Vec::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng, Vec::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng, Vec::new())
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((1, va.cols()), vb.shape(), "add_row shape mismatch");
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng, Vec::new())
    }

    /// Multiplies every row of `a` element-wise by the `1×n` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((1, va.cols()), vb.shape(), "mul_row shape mismatch");
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(vb.data()) {
                *x *= y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MulRow(a, b), ng, Vec::new())
    }

    /// Multiplies `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleBy(a, s), ng, Vec::new())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng, Vec::new())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + libm::tanh(u))
        });
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng, Vec::new())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng, Vec::new())
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for
    /// `j > i + offset` where `offset = cols - rows`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let offset = cols.saturating_sub(rows);
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + offset + 1).min(cols) } else { cols };
            let src = &va.row(r)[..limit];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut value.row_mut(r)[..limit];
            let mut sum = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = libm::exp(s - max);
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng, Vec::new())
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut value = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = va.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            for (d, &s) in value.row_mut(r).iter_mut().zip(x) {
                *d = (s - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNorm(a), ng, rstd)
    }

    /// Row-wise `x / sqrt(|x|² + eps)`; zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut value = Matrix::zeros(rows, cols);
        let mut rinv = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = va.row(r);
            let ri = 1.0 / libm::sqrt(dot(x, x) + eps);
            for (d, &s) in value.row_mut(r).iter_mut().zip(x) {
                *d = s * ri;
            }
            rinv.push(ri);
        }
        let ng = self.ng(a);
        self.push(value, Op::L2Normalize(a), ng, rinv)
    }

    /// `Σ_i −log softmax(a_i)[targets_i]` as a `1×1` node.
    pub fn cross_entropy(&mut self, a: Var, targets: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), targets.len(), "cross_entropy target count");
        let mut probs = Vec::with_capacity(va.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = va.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
            let lse = max + libm::log(sum);
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| libm::exp(v - lse)));
        }
        let ng = self.ng(a);
        self.push(Matrix::scalar(total), Op::CrossEntropy(a, targets.to_vec()), ng, probs)
    }

    /// Binary focal loss on logits, summed over every element.
    pub fn focal_loss(&mut self, logits: Var, targets: &Matrix, gamma: f64, alpha: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "focal_loss target shape");
        let total: f64 = vl.data().iter().zip(targets.data()).map(|(&z, &t)| focal_term(z, t, gamma, alpha)).sum();
        let ng = self.ng(logits);
        self.push(Matrix::scalar(total), Op::Focal(logits, targets.clone(), gamma, alpha), ng, Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(total), Op::Sum(a), ng, Vec::new())
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut value = Matrix::zeros(1, cols);
        for r in 0..rows {
            for (d, s) in value.data_mut().iter_mut().zip(va.row(r)) {
                *d += s;
            }
        }
        value.scale_assign(1.0 / rows.max(1) as f64);
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng, Vec::new())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            let w = vp.cols();
            for r in 0..rows {
                value.row_mut(r)[off..off + w].copy_from_slice(vp.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng, Vec::new())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng, Vec::new())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(va.rows(), len);
        for r in 0..va.rows() {
            value.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng, Vec::new())
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let c = va.cols();
        let value = Matrix::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng, Vec::new())
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng, Vec::new())
    }

    /// Reverse pass from the scalar `loss`; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut out = Grads::zeros_like(self.store);
        if !self.nodes[loss.0].needs_grad {
            return out;
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Param(id) = self.nodes[i].op {
                out.grads[id.0] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Matrix>], v: Var, m: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        }
    }

    fn backprop(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm_nt(g.rows(), g.cols(), vb.rows(), g.data(), vb.data(), da.data_mut());
                    self.accum(grads, a, da);
                }
                if self.ng(b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(va.rows(), va.cols(), g.cols(), va.data(), g.data(), db.data_mut());
                    self.accum(grads, b, db);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm_nn(g.rows(), g.cols(), vb.cols(), g.data(), vb.data(), da.data_mut());
                    self.accum(grads, a, da);
                }
                if self.ng(b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(g.rows(), g.cols(), va.cols(), g.data(), va.data(), db.data_mut());
                    self.accum(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    let d = elementwise(g, self.value(b), |x, y| x * y);
                    self.accum(grads, a, d);
                }
                if self.ng(b) {
                    let d = elementwise(g, self.value(a), |x, y| x * y);
                    self.accum(grads, b, d);
                }
            }
            &Op::AddRow(a, b) => {
                self.accum(grads, a, g.clone());
                if self.ng(b) {
                    self.accum(grads, b, col_sums(g));
                }
            }
            &Op::MulRow(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (x, y) in da.row_mut(r).iter_mut().zip(vb.data()) {
                            *x *= y;
                        }
                    }
                    self.accum(grads, a, da);
                }
                if self.ng(b) {
                    self.accum(grads, b, col_sums(&elementwise(g, va, |x, y| x * y)));
                }
            }
            &Op::ScaleBy(a, s) => {
                let sv = self.value(s).item();
                if self.ng(a) {
                    self.accum(grads, a, g.map(|x| x * sv));
                }
                if self.ng(s) {
                    let ds = dot(g.data(), self.value(a).data());
                    self.accum(grads, s, Matrix::scalar(ds));
                }
            }
            &Op::Scale(a, c) => self.accum(grads, a, g.map(|x| x * c)),
            &Op::Gelu(a) => {
                let d = elementwise(g, self.value(a), |gy, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = libm::tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.accum(grads, a, d);
            }
            &Op::Exp(a) => {
                let d = elementwise(g, &node.value, |x, y| x * y);
                self.accum(grads, a, d);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((dx, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dx = yv * (gv - s);
                    }
                }
                self.accum(grads, a, d);
            }
            &Op::LayerNorm(a) => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = dot(gr, yr) / n;
                    let rs = node.aux[r];
                    for ((dx, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dx = rs * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accum(grads, a, d);
            }
            &Op::L2Normalize(a) => {
                let x = self.value(a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (xr, gr) = (x.row(r), g.row(r));
                    let ri = node.aux[r];
                    let xg = dot(xr, gr);
                    let c = ri * ri * ri * xg;
                    for ((dx, &xv), &gv) in d.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *dx = ri * gv - c * xv;
                    }
                }
                self.accum(grads, a, d);
            }
            Op::CrossEntropy(a, targets) => {
                let gs = g.item();
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::from_vec(rows, cols, node.aux.clone());
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r)[t] -= 1.0;
                }
                d.scale_assign(gs);
                self.accum(grads, *a, d);
            }
            Op::Focal(a, targets, gamma, alpha) => {
                let gs = g.item();
                let z = self.value(*a);
                let data = z.data().iter().zip(targets.data()).map(|(&zv, &t)| gs * focal_grad(zv, t, *gamma, *alpha)).collect();
                self.accum(grads, *a, Matrix::from_vec(z.rows(), z.cols(), data));
            }
            &Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accum(grads, a, Matrix::filled(r, c, g.item()));
            }
            &Op::MeanRows(a) => {
                let (r, c) = self.shape(a);
                let mut d = Matrix::zeros(r, c);
                let inv = 1.0 / r.max(1) as f64;
                for row in 0..r {
                    for (x, &gv) in d.row_mut(row).iter_mut().zip(g.data()) {
                        *x = gv * inv;
                    }
                }
                self.accum(grads, a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, w) = self.shape(p);
                    if self.ng(p) {
                        let mut d = Matrix::zeros(r, w);
                        for row in 0..r {
                            d.row_mut(row).copy_from_slice(&g.row(row)[off..off + w]);
                        }
                        self.accum(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let d = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        self.accum(grads, p, d);
                    }
                    off += r;
                }
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = self.shape(a);
                let mut d = Matrix::zeros(r, c);
                let w = g.cols();
                for row in 0..r {
                    d.row_mut(row)[start..start + w].copy_from_slice(g.row(row));
                }
                self.accum(grads, a, d);
            }
            &Op::SliceRows(a, start) => {
                let (r, c) = self.shape(a);
                let mut d = Matrix::zeros(r, c);
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accum(grads, a, d);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (x, &gv) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                        *x += gv;
                    }
                }
                self.accum(grads, *a, d);
            }
        }
    }
}

impl Graph<'static> {
    /// Graph with no parameter store, for pure tensor computations.
    pub fn detached() -> Self {
        Self::new(&EMPTY_STORE)
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (d, s) in out.data_mut().iter_mut().zip(m.row(r)) {
            *d += s;
        }
    }
    out
}

/// Focal loss of one logit `z` against a binary target `t`.
pub fn focal_term(z: f64, t: f64, gamma: f64, alpha: f64) -> f64 {
    let p = sigmoid(z);
    let pos = -alpha * libm::pow(1.0 - p, gamma) * log_sigmoid(z);
    let neg = -(1.0 - alpha) * libm::pow(p, gamma) * log_sigmoid(-z);
    t * pos + (1.0 - t) * neg
}

fn focal_grad(z: f64, t: f64, gamma: f64, alpha: f64) -> f64 {
    let p = sigmoid(z);
    let q = 1.0 - p;
    // d/dz of −α q^γ log p and of −(1−α) p^γ log q
    let pos = alpha * libm::pow(q, gamma) * (gamma * p * log_sigmoid(z) - q);
    let neg = -(1.0 - alpha) * libm::pow(p, gamma) * (gamma * q * log_sigmoid(-z) - p);
    t * pos + (1.0 - t) * neg
}
