//! Neural velocity and source fields with a piecewise-linear time basis.
//!
//! The velocity is `v(x, t) = sum_i phi_i(t) v_i(x)` where `phi_i` are hat
//! functions on the uniform grid `t_i = i / M` and each `v_i` is a sum of `L`
//! two-layer tanh networks `W2 tanh(W1 x + b1) + b2`. The source is a linear
//! read-out `f = w^T u + b` of a second network `u` with the same structure.
//!
//! At any time at most two basis functions are active. Their `L` blocks are
//! evaluated as one wide layer: the first-layer weights are stacked to
//! `[k H, d]` and the second-layer weights, pre-scaled by `phi_i(t)`, to
//! `[d, k H]`. The spatial divergence uses the closed form
//! `sum_h (1 - tanh(a_h)^2) c_h` with `c_h = sum_k W2[k, h] W1[h, k]`, so no
//! second-order differentiation is needed.

use std::collections::HashMap;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("invalid field sizes: {0}")]
    Sizes(String),
    #[error("parameter document: {0}")]
    Document(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Hat functions on `M` uniform intervals of `[0, 1]` (`M + 1` functions).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HatBasis {
    intervals: usize,
}

impl HatBasis {
    pub fn new(intervals: usize) -> Self {
        Self { intervals }
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> f64 {
        if self.intervals == 0 {
            0.0
        } else {
            i as f64 / self.intervals as f64
        }
    }

    /// Nonzero `(index, phi_index(t))` pairs; one pair at grid nodes, two elsewhere.
    pub fn weights(&self, t: f64) -> Result<Vec<(usize, f64)>, FieldError> {
        basis_weights(t, self.intervals)
    }
}

/// Active hat functions at `t` for `m` intervals.
pub fn basis_weights(t: f64, m: usize) -> Result<Vec<(usize, f64)>, FieldError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FieldError::TimeOutOfRange(t));
    }
    if m == 0 {
        return Ok(vec![(0, 1.0)]);
    }
    let s = t * m as f64;
    let mut i = s.floor() as usize;
    let mut frac = s - i as f64;
    if i >= m {
        return Ok(vec![(m, 1.0)]);
    }
    if 1.0 - frac < 1e-12 {
        i += 1;
        frac = 0.0;
    }
    if frac < 1e-12 {
        return Ok(vec![(i, 1.0)]);
    }
    Ok(vec![(i, 1.0 - frac), (i + 1, frac)])
}

/// One two-layer block `W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    /// `[H, d]`
    pub w1: Tensor,
    /// `[1, H]`
    pub b1: Tensor,
    /// `[d, H]`
    pub w2: Tensor,
    /// `[1, d]`
    pub b2: Tensor,
}

impl MlpBlock {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[h, d]),
            b1: Tensor::zeros(&[1, h]),
            w2: Tensor::zeros(&[d, h]),
            b2: Tensor::zeros(&[1, d]),
        }
    }
}

/// Network sizes shared by the velocity and source fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldShape {
    pub dim: usize,
    /// Number of basis intervals `M`.
    pub intervals: usize,
    /// Blocks per basis function `L`.
    pub width: usize,
    /// Hidden units per block `H`.
    pub hidden: usize,
}

impl FieldShape {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.dim == 0 || self.width == 0 || self.hidden == 0 {
            return Err(FieldError::Sizes(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    shape: FieldShape,
    /// Indexed by `i * L + l`.
    blocks: Vec<MlpBlock>,
}

impl VelocityField {
    pub fn zeros(shape: FieldShape) -> Self {
        let n = (shape.intervals + 1) * shape.width;
        Self {
            shape,
            blocks: (0..n).map(|_| MlpBlock::zeros(shape.dim, shape.hidden)).collect(),
        }
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn block(&self, i: usize, l: usize) -> &MlpBlock {
        &self.blocks[i * self.shape.width + l]
    }

    pub fn block_mut(&mut self, i: usize, l: usize) -> &mut MlpBlock {
        let w = self.shape.width;
        &mut self.blocks[i * w + l]
    }

    pub fn blocks(&self) -> &[MlpBlock] {
        &self.blocks
    }

    fn init<R: Rng + ?Sized>(shape: FieldShape, rng: &mut R) -> Self {
        let mut f = Self::zeros(shape);
        let s1 = 1.0 / (shape.dim as f64).sqrt();
        let s2 = 1.0 / (shape.hidden as f64).sqrt();
        for b in &mut f.blocks {
            fill_uniform(&mut b.w1, s1, rng);
            fill_uniform(&mut b.w2, s2, rng);
        }
        f
    }
}

/// `f(x, t) = w^T u(x, t) + b`
#[derive(Debug, Clone, PartialEq)]
pub struct SourceField {
    pub inner: VelocityField,
    /// `[d, 1]`
    pub w: Tensor,
    /// `[1, 1]`
    pub b: Tensor,
}

impl SourceField {
    pub fn zeros(shape: FieldShape) -> Self {
        Self {
            inner: VelocityField::zeros(shape),
            w: Tensor::zeros(&[shape.dim, 1]),
            b: Tensor::zeros(&[1, 1]),
        }
    }

    /// Constant source `f = c` (read-out weights zero).
    pub fn constant(shape: FieldShape, c: f64) -> Self {
        let mut f = Self::zeros(shape);
        f.b = Tensor::scalar(c);
        f
    }
}

fn fill_uniform<R: Rng + ?Sized>(t: &mut Tensor, s: f64, rng: &mut R) {
    let dist = Uniform::new(-s, s).expect("positive half-width");
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
}

/// Velocity and source parameters trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    pub velocity: VelocityField,
    pub source: SourceField,
}

/// Which parameter groups are registered as trainable on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub velocity: bool,
    pub source: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        velocity: true,
        source: true,
    };
    pub const VELOCITY_ONLY: Self = Self {
        velocity: true,
        source: false,
    };
    pub const NONE: Self = Self {
        velocity: false,
        source: false,
    };
}

/// Uniform(-s, s) weights with `s = 1/sqrt(fan_in)`, zero biases.
pub fn init_params<R: Rng + ?Sized>(shape: FieldShape, rng: &mut R) -> FieldPair {
    let velocity = VelocityField::init(shape, rng);
    let inner = VelocityField::init(shape, rng);
    let mut w = Tensor::zeros(&[shape.dim, 1]);
    fill_uniform(&mut w, 1.0 / (shape.dim as f64).sqrt(), rng);
    FieldPair {
        velocity,
        source: SourceField {
            inner,
            w,
            b: Tensor::zeros(&[1, 1]),
        },
    }
}

impl FieldPair {
    pub fn zeros(shape: FieldShape) -> Self {
        Self {
            velocity: VelocityField::zeros(shape),
            source: SourceField::zeros(shape),
        }
    }

    pub fn shape(&self) -> FieldShape {
        self.velocity.shape
    }

    /// Every parameter tensor with its document key, in a fixed order:
    /// velocity blocks, source blocks, then `f/w` and `f/b`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_named(&mut out, "v", &self.velocity);
        push_named(&mut out, "f", &self.source.inner);
        out.push(("f/w".to_string(), &self.source.w));
        out.push(("f/b".to_string(), &self.source.b));
        out
    }

    /// Mutable tensors in the order of [`FieldPair::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in self.velocity.blocks.iter_mut().chain(self.source.inner.blocks.iter_mut()) {
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.source.w);
        out.push(&mut self.source.b);
        out
    }

    /// Number of velocity tensors at the front of the fixed ordering.
    pub fn velocity_tensor_count(&self) -> usize {
        self.velocity.blocks.len() * 4
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers all tensors on `tape`; groups not marked trainable become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Result<BoundFields, FieldError> {
        let velocity = BoundNetwork::bind(&self.velocity, tape, trainable.velocity)?;
        let inner = BoundNetwork::bind(&self.source.inner, tape, trainable.source)?;
        let w = tape.leaf(self.source.w.clone(), trainable.source)?;
        let b = tape.leaf(self.source.b.clone(), trainable.source)?;
        Ok(BoundFields {
            velocity,
            source: BoundSource { inner, w, b },
        })
    }

    /// Flat JSON document `{d, M, L, H, "v/W1/i/l": [...], ...}`.
    pub fn to_json(&self) -> Value {
        let s = self.shape();
        let mut map = Map::new();
        map.insert("d".into(), s.dim.into());
        map.insert("M".into(), s.intervals.into());
        map.insert("L".into(), s.width.into());
        map.insert("H".into(), s.hidden.into());
        for (name, t) in self.named_tensors() {
            map.insert(name, Value::Array(t.data().iter().map(|&v| Value::from(v)).collect()));
        }
        Value::Object(map)
    }

    pub fn from_json(doc: &Value) -> Result<Self, FieldError> {
        let obj = doc
            .as_object()
            .ok_or_else(|| FieldError::Document("expected an object".into()))?;
        let size = |k: &str| {
            obj.get(k)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| FieldError::Document(format!("missing integer `{k}`")))
        };
        let shape = FieldShape {
            dim: size("d")?,
            intervals: size("M")?,
            width: size("L")?,
            hidden: size("H")?,
        };
        shape.validate()?;
        let mut pair = Self::zeros(shape);
        let names: Vec<String> = pair.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(pair.tensors_mut()) {
            let arr = obj
                .get(name)
                .and_then(Value::as_array)
                .ok_or_else(|| FieldError::Document(format!("missing array `{name}`")))?;
            if arr.len() != t.len() {
                return Err(FieldError::Document(format!(
                    "`{name}` has {} values, expected {}",
                    arr.len(),
                    t.len()
                )));
            }
            for (dst, v) in t.data_mut().iter_mut().zip(arr) {
                *dst = v
                    .as_f64()
                    .ok_or_else(|| FieldError::Document(format!("`{name}` holds a non-number")))?;
            }
        }
        Ok(pair)
    }
}

fn push_named<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, net: &'a VelocityField) {
    let w = net.shape.width;
    for (k, b) in net.blocks.iter().enumerate() {
        let (i, l) = (k / w, k % w);
        out.push((format!("{prefix}/W1/{i}/{l}"), &b.w1));
        out.push((format!("{prefix}/b1/{i}/{l}"), &b.b1));
        out.push((format!("{prefix}/W2/{i}/{l}"), &b.w2));
        out.push((format!("{prefix}/b2/{i}/{l}"), &b.b2));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Output of one wide-layer evaluation.
#[derive(Debug, Clone, Copy)]
pub struct NetworkEval {
    /// Hidden activations `tanh(a)`, `[r, k H]`.
    pub hidden: NodeId,
    /// Second-layer weights scaled by `phi`, `[d, k H]`.
    pub w2: NodeId,
    /// `sum phi_i b2`, `[1, d]`.
    pub bias: NodeId,
    /// Stacked first-layer weights, `[k H, d]`.
    pub w1: NodeId,
}

/// A velocity-shaped network whose tensors live on a tape.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    shape: FieldShape,
    blocks: Vec<BlockNodes>,
    // active basis indices -> (stacked W1, stacked b1)
    stacked: HashMap<Vec<usize>, (NodeId, NodeId)>,
}

impl BoundNetwork {
    fn bind(net: &VelocityField, tape: &mut Tape, trainable: bool) -> Result<Self, TapeError> {
        let mut blocks = Vec::with_capacity(net.blocks.len());
        for b in &net.blocks {
            blocks.push(BlockNodes {
                w1: tape.leaf(b.w1.clone(), trainable)?,
                b1: tape.leaf(b.b1.clone(), trainable)?,
                w2: tape.leaf(b.w2.clone(), trainable)?,
                b2: tape.leaf(b.b2.clone(), trainable)?,
            });
        }
        Ok(Self {
            shape: net.shape,
            blocks,
            stacked: HashMap::new(),
        })
    }

    pub fn blocks(&self) -> &[BlockNodes] {
        &self.blocks
    }

    /// Node ids of every tensor, in [`FieldPair::named_tensors`] order.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.blocks.iter().flat_map(|b| [b.w1, b.b1, b.w2, b.b2]).collect()
    }

    fn check_input(&self, tape: &Tape, x: NodeId) -> Result<(), FieldError> {
        match tape.value(x).dims2() {
            Some((_, d)) if d == self.shape.dim => Ok(()),
            _ => Err(FieldError::Sizes(format!(
                "input shape {:?}, field dimension {}",
                tape.value(x).shape(),
                self.shape.dim
            ))),
        }
    }

    fn eval(&mut self, tape: &mut Tape, x: NodeId, t: f64) -> Result<NetworkEval, FieldError> {
        self.check_input(tape, x)?;
        let active = basis_weights(t, self.shape.intervals)?;
        let width = self.shape.width;
        let key: Vec<usize> = active.iter().map(|&(i, _)| i).collect();
        let (w1, b1) = match self.stacked.get(&key) {
            Some(&pair) => pair,
            None => {
                let mut w1s = Vec::new();
                let mut b1s = Vec::new();
                for &i in &key {
                    for l in 0..width {
                        let b = self.blocks[i * width + l];
                        w1s.push(b.w1);
                        b1s.push(b.b1);
                    }
                }
                let pair = (tape.stack(&w1s, 0)?, tape.stack(&b1s, 1)?);
                self.stacked.insert(key, pair);
                pair
            }
        };
        let mut w2s = Vec::new();
        let mut b2s = Vec::new();
        let mut phis = Vec::new();
        for &(i, phi) in &active {
            for l in 0..width {
                let b = self.blocks[i * width + l];
                w2s.push(if phi == 1.0 { b.w2 } else { tape.scale(b.w2, phi)? });
                b2s.push(b.b2);
                phis.push(phi);
            }
        }
        let w2 = tape.stack(&w2s, 1)?;
        let bias = tape.lincomb(&b2s, &phis)?;
        let pre = tape.matmul_t(x, w1)?;
        let pre = tape.add_row(pre, b1)?;
        let hidden = tape.tanh(pre)?;
        Ok(NetworkEval { hidden, w2, bias, w1 })
    }

    fn output(&self, tape: &mut Tape, e: &NetworkEval) -> Result<NodeId, TapeError> {
        let y = tape.matmul_t(e.hidden, e.w2)?;
        tape.add_row(y, e.bias)
    }

    /// `sum_h (1 - tanh(a_h)^2) c_h` per sample, `[r, 1]`.
    fn divergence(&self, tape: &mut Tape, e: &NetworkEval) -> Result<NodeId, TapeError> {
        let w2t = tape.transpose(e.w2)?;
        let prod = tape.mul(e.w1, w2t)?;
        let c = tape.sum_axis(prod, 1)?;
        let c_total = tape.sum_all(c)?;
        let neg_c = tape.scale(c, -1.0)?;
        let sq = tape.square(e.hidden)?;
        let q = tape.matmul(sq, neg_c)?;
        tape.add_row(q, c_total)
    }
}

/// Velocity evaluation together with its divergence.
#[derive(Debug, Clone, Copy)]
pub struct VelocityEval {
    /// `[r, d]`
    pub velocity: NodeId,
    /// `[r, 1]`
    pub divergence: NodeId,
}

#[derive(Debug, Clone)]
pub struct BoundSource {
    pub inner: BoundNetwork,
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone)]
pub struct BoundFields {
    pub velocity: BoundNetwork,
    pub source: BoundSource,
}

impl BoundFields {
    /// Node ids in [`FieldPair::named_tensors`] order.
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut ids = self.velocity.node_ids();
        ids.extend(self.source.inner.node_ids());
        ids.push(self.source.w);
        ids.push(self.source.b);
        ids
    }

    pub fn eval_velocity(&mut self, tape: &mut Tape, x: NodeId, t: f64) -> Result<NodeId, FieldError> {
        let e = self.velocity.eval(tape, x, t)?;
        Ok(self.velocity.output(tape, &e)?)
    }

    pub fn eval_divergence(&mut self, tape: &mut Tape, x: NodeId, t: f64) -> Result<NodeId, FieldError> {
        let e = self.velocity.eval(tape, x, t)?;
        Ok(self.velocity.divergence(tape, &e)?)
    }

    /// Velocity and divergence sharing one hidden-layer evaluation.
    pub fn eval_velocity_and_divergence(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        t: f64,
    ) -> Result<VelocityEval, FieldError> {
        let e = self.velocity.eval(tape, x, t)?;
        Ok(VelocityEval {
            velocity: self.velocity.output(tape, &e)?,
            divergence: self.velocity.divergence(tape, &e)?,
        })
    }

    /// `w^T u(x, t) + b` per sample, `[r, 1]`.
    pub fn eval_source(&mut self, tape: &mut Tape, x: NodeId, t: f64) -> Result<NodeId, FieldError> {
        let src = &mut self.source;
        let e = src.inner.eval(tape, x, t)?;
        // u = hidden * W2^T + bias, so w^T u = hidden * (W2^T w) + bias * w
        let w2t = tape.transpose(e.w2)?;
        let g = tape.matmul(w2t, src.w)?;
        let offset = tape.matmul(e.bias, src.w)?;
        let offset = tape.add(offset, src.b)?;
        let f = tape.matmul(e.hidden, g)?;
        Ok(tape.add_row(f, offset)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_examples() {
        assert_eq!(basis_weights(0.0, 5).unwrap(), vec![(0, 1.0)]);
        let w = basis_weights(0.3, 5).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!((w[0].0, w[1].0), (1, 2));
        assert!((w[0].1 - 0.5).abs() < 1e-15 && (w[1].1 - 0.5).abs() < 1e-15);
        assert_eq!(basis_weights(1.0, 5).unwrap(), vec![(5, 1.0)]);
        assert!(matches!(basis_weights(1.01, 5), Err(FieldError::TimeOutOfRange(_))));
        assert!(matches!(basis_weights(-0.1, 5), Err(FieldError::TimeOutOfRange(_))));
    }

    #[test]
    fn basis_is_nodal() {
        for m in 1..9 {
            for i in 0..=m {
                let t = i as f64 / m as f64;
                assert_eq!(basis_weights(t, m).unwrap(), vec![(i, 1.0)], "m={m} i={i}");
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let shape = FieldShape {
            dim: 3,
            intervals: 2,
            width: 2,
            hidden: 4,
        };
        let a = init_params(shape, &mut ChaCha8Rng::seed_from_u64(0));
        let b = init_params(shape, &mut ChaCha8Rng::seed_from_u64(0));
        let c = init_params(shape, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named_tensors() {
            if name.contains("/b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let s1 = 1.0 / 3f64.sqrt();
        assert!(a.velocity.block(0, 0).w1.data().iter().all(|v| v.abs() <= s1));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let shape = FieldShape {
            dim: 2,
            intervals: 3,
            width: 2,
            hidden: 3,
        };
        let p = init_params(shape, &mut ChaCha8Rng::seed_from_u64(9));
        let text = crate::json::to_string(&p.to_json());
        let back = FieldPair::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let shape = FieldShape {
            dim: 2,
            intervals: 1,
            width: 1,
            hidden: 2,
        };
        let p = FieldPair::zeros(shape);
        let mut tape = Tape::new();
        let mut b = p.bind(&mut tape, Trainable::ALL).unwrap();
        let x = tape.constant(Tensor::zeros(&[4, 3])).unwrap();
        assert!(matches!(b.eval_velocity(&mut tape, x, 0.5), Err(FieldError::Sizes(_))));
    }
}
