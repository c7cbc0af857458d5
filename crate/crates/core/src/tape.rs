//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation is evaluated eagerly when it is recorded and its value is
//! cached on the tape. Records are appended in topological order, so
//! [`Tape::backward`] is a single reverse sweep with a fixed accumulation
//! order; two tapes built by the same sequence of calls give bit-identical
//! values and gradients.
//!
//! Matrices are 2-D tensors. Per-sample quantities are `[r, 1]` columns and
//! scalars are `[1, 1]`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::par::{self, MatRef};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("log: non-positive input {value} at flat index {index}")]
    LogNonPositive { index: usize, value: f64 },
    #[error("backward root must hold a single value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a record on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set. Higher-level functions are compositions of these.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale * x + shift`
    Affine { input: NodeId, scale: f64, shift: f64 },
    /// `sum_k coeffs[k] * inputs[k]`
    LinComb { inputs: Vec<NodeId>, coeffs: Vec<f64> },
    /// `lhs * rhs` or `lhs * rhs^T`
    MatMul { lhs: NodeId, rhs: NodeId, rhs_transposed: bool },
    Transpose(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Clamp { input: NodeId, lo: f64, hi: f64 },
    SumAll(NodeId),
    /// Axis 0 gives `[1, n]`, axis 1 gives `[m, 1]`.
    SumAxis { input: NodeId, axis: usize },
    /// `[m, n] + [1, n]` broadcast over rows.
    AddRow { input: NodeId, row: NodeId },
    SelectColumns { input: NodeId, columns: Vec<usize> },
    /// Concatenation of 2-D inputs along `axis`.
    Stack { inputs: Vec<NodeId>, axis: usize },
    /// A scalar function applied to every row of `[m, n]`, giving `[m, 1]`.
    /// `grad` caches the per-row gradient `[m, n]`.
    RowField { input: NodeId, grad: Tensor },
}

struct Record {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation log for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
    params: Vec<NodeId>,
    stored_bytes: usize,
    peak_bytes: usize,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

fn shape_err(op: &'static str, shapes: &[&Tensor]) -> TapeError {
    TapeError::Shape {
        op,
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| shape_err(op, &[t]))
}

/// `tanh` through a single `exp`. Absolute error stays within a few ulps,
/// which is all the activations need, at a fraction of libm's cost.
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parameter leaves in registration order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.records[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.records[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.records[id.0].requires_grad
    }

    /// Bytes held by cached forward values.
    pub fn stored_bytes(&self) -> usize {
        self.stored_bytes
    }

    /// Largest number of bytes held at once by forward values plus live
    /// gradient buffers, over the life of the tape.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes.max(self.stored_bytes)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.records.len() {
            Ok(())
        } else {
            Err(TapeError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.stored_bytes += value.bytes();
        self.peak_bytes = self.peak_bytes.max(self.stored_bytes);
        self.records.push(Record {
            op,
            value,
            requires_grad,
        });
        NodeId(self.records.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.records[id.0].requires_grad)
    }

    /// Records a leaf. Parameter leaves receive gradients in [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor, is_parameter: bool) -> Result<NodeId> {
        if let Some(index) = t.first_non_finite() {
            return Err(TapeError::NonFinite { op: "leaf", index });
        }
        let id = self.push(Op::Leaf, t, is_parameter);
        if is_parameter {
            self.params.push(id);
        }
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t, true)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64 + Sync + Send,
        op: Op,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, &[ta, tb]));
        }
        let data = par::zip_map(ta.data(), tb.data(), f);
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64 + Sync + Send,
        op: Op,
    ) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), par::map(ta.data(), f)).expect("same shape");
        let rg = self.rg(&[a]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.affine(a, c, 0.0)
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.unary(
            a,
            move |x| scale * x + shift,
            Op::Affine {
                input: a,
                scale,
                shift,
            },
        )
    }

    pub fn lincomb(&mut self, inputs: &[NodeId], coeffs: &[f64]) -> Result<NodeId> {
        if inputs.is_empty() || inputs.len() != coeffs.len() {
            return Err(TapeError::Invalid(format!(
                "lincomb: {} inputs, {} coefficients",
                inputs.len(),
                coeffs.len()
            )));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        if inputs.iter().any(|&id| self.value(id).shape() != shape.as_slice()) {
            let ts: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
            return Err(shape_err("lincomb", &ts));
        }
        let slices: Vec<&[f64]> = inputs.iter().map(|&id| self.value(id).data()).collect();
        let value = Tensor::new(shape, par::lincomb(&slices, coeffs)).expect("same shape");
        let rg = self.rg(inputs);
        Ok(self.push(
            Op::LinComb {
                inputs: inputs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, rhs_transposed: bool) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (br, bc) = dims2("matmul", tb)?;
        let (kb, n) = if rhs_transposed { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", &[ta, tb]));
        }
        let bview = if rhs_transposed {
            MatRef::transposed(tb.data(), bc)
        } else {
            MatRef::normal(tb.data(), bc)
        };
        let out = par::gemm_new(m, k, n, MatRef::normal(ta.data(), k), bview);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Op::MatMul {
                lhs: a,
                rhs: b,
                rhs_transposed,
            },
            Tensor::matrix(m, n, out),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let (r, c) = dims2("transpose", ta)?;
        let value = Tensor::matrix(c, r, transpose_data(ta.data(), r, c));
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let id = self.unary(a, f64::exp, Op::Exp(a))?;
        if let Some(index) = self.value(id).first_non_finite() {
            self.pop();
            return Err(TapeError::NonFinite { op: "exp", index });
        }
        Ok(id)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0))
        {
            return Err(TapeError::LogNonPositive { index, value });
        }
        let id = self.unary(a, f64::ln, Op::Log(a))?;
        if let Some(index) = self.value(id).first_non_finite() {
            self.pop();
            return Err(TapeError::NonFinite { op: "log", index });
        }
        Ok(id)
    }

    fn pop(&mut self) {
        if let Some(r) = self.records.pop() {
            self.stored_bytes -= r.value.bytes();
        }
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(TapeError::Invalid(format!("clamp: lo {lo} > hi {hi}")));
        }
        self.unary(a, move |x| x.clamp(lo, hi), Op::Clamp { input: a, lo, hi })
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = par::sum(self.value(a).data());
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s), rg))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let (r, c) = dims2("sum_axis", ta)?;
        let d = ta.data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, &x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                Tensor::row(out)
            }
            1 => Tensor::column(d.chunks(c).map(|row| row.iter().sum()).collect()),
            _ => return Err(shape_err("sum_axis", &[ta])),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumAxis { input: a, axis }, value, rg))
    }

    /// `a[i, :] + row` for every `i`; `row` may have any shape holding `cols` values.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, c) = dims2("add_row", ta)?;
        if tr.len() != c {
            return Err(shape_err("add_row", &[ta, tr]));
        }
        let rv = tr.data();
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(rv) {
                *o += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a, row]);
        Ok(self.push(Op::AddRow { input: a, row }, value, rg))
    }

    pub fn select_columns(&mut self, a: NodeId, columns: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let ta = self.value(a);
        let (r, c) = dims2("select_columns", ta)?;
        if columns.is_empty() || columns.iter().any(|&j| j >= c) {
            return Err(shape_err("select_columns", &[ta]));
        }
        let d = ta.data();
        let mut out = Vec::with_capacity(r * columns.len());
        for i in 0..r {
            out.extend(columns.iter().map(|&j| d[i * c + j]));
        }
        let value = Tensor::matrix(r, columns.len(), out);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::SelectColumns {
                input: a,
                columns: columns.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Concatenates 2-D inputs: axis 0 stacks rows, axis 1 stacks columns.
    pub fn stack(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() || axis > 1 {
            return Err(TapeError::Invalid("stack: empty input or axis > 1".into()));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let ts: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
        let mut dims = Vec::with_capacity(ts.len());
        for t in &ts {
            dims.push(dims2("stack", t)?);
        }
        let value = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(shape_err("stack", &ts));
            }
            let r: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(r * c);
            for t in &ts {
                out.extend_from_slice(t.data());
            }
            Tensor::matrix(r, c, out)
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(shape_err("stack", &ts));
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for (t, d) in ts.iter().zip(&dims) {
                    out.extend_from_slice(&t.data()[i * d.1..(i + 1) * d.1]);
                }
            }
            Tensor::matrix(r, c, out)
        };
        let rg = self.rg(inputs);
        Ok(self.push(
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    /// Applies `f(row, grad_out) -> value` to each row of `a` (`[m, n]`),
    /// producing `[m, 1]`. `f` must write the gradient of its value with
    /// respect to the row into `grad_out`.
    pub fn row_field<F>(&mut self, a: NodeId, f: F) -> Result<NodeId>
    where
        F: Fn(&[f64], &mut [f64]) -> f64 + Sync + Send,
    {
        self.check(a)?;
        let ta = self.value(a);
        let (r, c) = dims2("row_field", ta)?;
        let src = ta.data();
        let mut grad = vec![0.0; r * c];
        let mut vals = vec![0.0; r];
        for ((g, v), row) in grad.chunks_mut(c).zip(vals.iter_mut()).zip(src.chunks(c)) {
            *v = f(row, g);
        }
        let value = Tensor::column(vals);
        if let Some(index) = value.first_non_finite() {
            return Err(TapeError::NonFinite {
                op: "row_field",
                index,
            });
        }
        let rg = self.rg(&[a]);
        let grad = Tensor::matrix(r, c, grad);
        self.stored_bytes += grad.bytes();
        Ok(self.push(Op::RowField { input: a, grad }, value, rg))
    }

    /// Gradients of the single-valued `root` with respect to every parameter
    /// leaf. Parameters the root does not depend on get zero tensors.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        self.check(root)?;
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(TapeError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let mut live = self.stored_bytes;
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        live += rv.bytes();
        let mut out = BTreeMap::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            live -= g.bytes();
            let rec = &self.records[idx];
            if !rec.requires_grad {
                continue;
            }
            if matches!(rec.op, Op::Leaf) {
                out.insert(NodeId(idx), g);
                continue;
            }
            for (target, contrib) in self.local_grads(idx, g) {
                if !self.records[target.0].requires_grad {
                    continue;
                }
                let slot = &mut grads[target.0];
                match slot {
                    Some(acc) => par::axpy(acc.data_mut(), 1.0, contrib.data()),
                    None => {
                        live += contrib.bytes();
                        *slot = Some(contrib);
                    }
                }
            }
            self.peak_bytes = self.peak_bytes.max(live);
        }

        for &p in &self.params {
            out.entry(p)
                .or_insert_with(|| Tensor::zeros(self.records[p.0].value.shape()));
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products of record `idx` against upstream `g`.
    fn local_grads(&self, idx: usize, owned: Tensor) -> Vec<(NodeId, Tensor)> {
        let g = &owned;
        let rec = &self.records[idx];
        let wrap = |like: &Tensor, data: Vec<f64>| Tensor::new(like.shape().to_vec(), data).expect("shape");
        let needs = |id: NodeId| self.records[id.0].requires_grad;
        match &rec.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => match (needs(*a), needs(*b)) {
                (true, true) => vec![(*a, owned.clone()), (*b, owned)],
                (true, false) => vec![(*a, owned)],
                (false, true) => vec![(*b, owned)],
                (false, false) => vec![],
            },
            Op::Sub(a, b) => {
                let neg = wrap(g, par::map(g.data(), |x| -x));
                vec![(*a, owned), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut v = Vec::with_capacity(2);
                if needs(*a) {
                    v.push((*a, wrap(g, par::zip_map(g.data(), tb.data(), |x, y| x * y))));
                }
                if needs(*b) {
                    v.push((*b, wrap(g, par::zip_map(g.data(), ta.data(), |x, y| x * y))));
                }
                v
            }
            Op::Affine { input, scale, .. } => {
                let s = *scale;
                vec![(*input, wrap(g, par::map(g.data(), move |x| s * x)))]
            }
            Op::LinComb { inputs, coeffs } => inputs
                .iter()
                .zip(coeffs)
                .filter(|(id, _)| needs(**id))
                .map(|(id, &c)| (*id, wrap(g, par::map(g.data(), move |x| c * x))))
                .collect(),
            Op::MatMul {
                lhs,
                rhs,
                rhs_transposed,
            } => {
                let (ta, tb) = (self.value(*lhs), self.value(*rhs));
                let (m, k) = ta.dims2().expect("2-D");
                let (br, bc) = tb.dims2().expect("2-D");
                let n = if *rhs_transposed { br } else { bc };
                let gv = MatRef::normal(g.data(), n);
                let mut v = Vec::with_capacity(2);
                if needs(*lhs) {
                    // dA = g * B^T (or g * B when rhs is stored transposed)
                    let bview = if *rhs_transposed {
                        MatRef::normal(tb.data(), bc)
                    } else {
                        MatRef::transposed(tb.data(), bc)
                    };
                    let da = par::gemm_new(m, n, k, gv, bview);
                    v.push((*lhs, Tensor::matrix(m, k, da)));
                }
                if needs(*rhs) {
                    let db = if *rhs_transposed {
                        // B is n x k: dB = g^T * A
                        par::gemm_new(n, m, k, MatRef::transposed(g.data(), n), MatRef::normal(ta.data(), k))
                    } else {
                        // B is k x n: dB = A^T * g
                        par::gemm_new(k, m, n, MatRef::transposed(ta.data(), k), gv)
                    };
                    v.push((*rhs, Tensor::matrix(br, bc, db)));
                }
                v
            }
            Op::Transpose(a) => {
                let (r, c) = g.dims2().expect("2-D");
                vec![(*a, Tensor::matrix(c, r, transpose_data(g.data(), r, c)))]
            }
            Op::Tanh(a) => vec![(
                *a,
                wrap(g, par::zip_map(g.data(), rec.value.data(), |x, y| x * (1.0 - y * y))),
            )],
            Op::Exp(a) => vec![(*a, wrap(g, par::zip_map(g.data(), rec.value.data(), |x, y| x * y)))],
            Op::Log(a) => vec![(
                *a,
                wrap(g, par::zip_map(g.data(), self.value(*a).data(), |x, y| x / y)),
            )],
            Op::Square(a) => vec![(
                *a,
                wrap(g, par::zip_map(g.data(), self.value(*a).data(), |x, y| 2.0 * x * y)),
            )],
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *input,
                    wrap(
                        g,
                        par::zip_map(g.data(), self.value(*input).data(), move |x, y| {
                            if (lo..=hi).contains(&y) {
                                x
                            } else {
                                0.0
                            }
                        }),
                    ),
                )]
            }
            Op::SumAll(a) => {
                let s = g.item();
                vec![(*a, Tensor::filled(self.value(*a).shape(), s))]
            }
            Op::SumAxis { input, axis } => {
                let ta = self.value(*input);
                let (r, c) = ta.dims2().expect("2-D");
                let gd = g.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = if *axis == 0 { gd[j] } else { gd[i] };
                    }
                }
                vec![(*input, Tensor::matrix(r, c, out))]
            }
            Op::AddRow { input, row } => {
                let mut v = Vec::with_capacity(2);
                if needs(*row) {
                    let (_, c) = g.dims2().expect("2-D");
                    let mut acc = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (o, &x) in acc.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    v.push((*row, wrap(self.value(*row), acc)));
                }
                if needs(*input) {
                    v.push((*input, owned));
                }
                v
            }
            Op::SelectColumns { input, columns } => {
                let ta = self.value(*input);
                let (r, c) = ta.dims2().expect("2-D");
                let k = columns.len();
                let gd = g.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for (jj, &j) in columns.iter().enumerate() {
                        out[i * c + j] += gd[i * k + jj];
                    }
                }
                vec![(*input, Tensor::matrix(r, c, out))]
            }
            Op::Stack { inputs, axis } => {
                let (_, gc) = g.dims2().expect("2-D");
                let gd = g.data();
                let mut v = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &id in inputs {
                    let (r, c) = self.value(id).dims2().expect("2-D");
                    if needs(id) {
                        let data = if *axis == 0 {
                            gd[offset * gc..(offset + r) * gc].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&gd[i * gc + offset..i * gc + offset + c]);
                            }
                            d
                        };
                        v.push((id, Tensor::matrix(r, c, data)));
                    }
                    offset += if *axis == 0 { r } else { c };
                }
                v
            }
            Op::RowField { input, grad } => {
                let (r, c) = grad.dims2().expect("2-D");
                let gd = g.data();
                let mut out = grad.data().to_vec();
                for i in 0..r {
                    for o in &mut out[i * c..(i + 1) * c] {
                        *o *= gd[i];
                    }
                }
                vec![(*input, Tensor::matrix(r, c, out))]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.01 + 1e-3;
            assert!((tanh(x) - x.tanh()).abs() < 4e-16, "{x}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
    }

    #[test]
    fn parameter_leaf_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(3.0)).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn leaves_get_increasing_ids() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(a.index() < b.index());
        assert_eq!(tape.value(a), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn rejects_non_finite_leaf() {
        let mut tape = Tape::new();
        let err = tape.constant(Tensor::row(vec![1.0, f64::INFINITY])).unwrap_err();
        assert_eq!(err, TapeError::NonFinite { op: "leaf", index: 1 });
    }

    #[test]
    fn forward_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::row(vec![0.0])).unwrap();
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(t).data(), &[0.0]);

        let a = tape.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::ones(&[3, 1])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &Tensor::matrix(2, 1, vec![3.0, 3.0]));

        let x = tape.constant(Tensor::row(vec![2.5])).unwrap();
        let l = tape.log(x).unwrap();
        let e = tape.exp(l).unwrap();
        assert!((tape.value(e).item() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::ones(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(TapeError::Shape { op: "matmul", .. })));
        let c = tape.constant(Tensor::ones(&[3, 2])).unwrap();
        assert!(matches!(tape.add(a, c), Err(TapeError::Shape { .. })));
        let neg = tape.constant(Tensor::row(vec![1.0, 0.0, -1.0])).unwrap();
        assert_eq!(
            tape.log(neg).unwrap_err(),
            TapeError::LogNonPositive { index: 1, value: 0.0 }
        );
        let big = tape.constant(Tensor::row(vec![1000.0])).unwrap();
        assert!(matches!(tape.exp(big), Err(TapeError::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::row(vec![3.0])).unwrap();
        let s = tape.square(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn independent_parameter_gets_zeros() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::ones(&[2, 2])).unwrap();
        let q = tape.param(Tensor::row(vec![2.0])).unwrap();
        let s = tape.square(q).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::ones(&[2, 1])).unwrap();
        assert_eq!(tape.backward(p).unwrap_err(), TapeError::NonScalarRoot(vec![2, 1]));
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::row(vec![-2.0, 0.5, 3.0])).unwrap();
        let c = tape.clamp(p, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(c).data(), &[-1.0, 0.5, 1.0]);
        let s = tape.sum_all(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn stack_and_select_round_trip() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(2, 1, vec![1.0, 2.0])).unwrap();
        let b = tape.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0])).unwrap();
        let s = tape.stack(&[a, b], 1).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let sel = tape.select_columns(s, &[2]).unwrap();
        assert_eq!(tape.value(sel).data(), &[4.0, 6.0]);
        let tot = tape.sum_all(sel).unwrap();
        let g = tape.backward(tot).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
