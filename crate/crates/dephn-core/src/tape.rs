//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every forward pass records its operations into a fresh [`Tape`]; values are
//! computed eagerly as nodes are pushed, and [`Tape::backward`] replays the
//! tape in reverse to accumulate adjoints. Storage is dense `f64` row-major.
//! The tape is append-only, so parent ids are always smaller than child ids
//! and the recorded graph is acyclic by construction.

use std::collections::BTreeMap;

use thiserror::Error;

/// Errors raised while recording or differentiating a tape.
#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects axis < rank, got axis {axis} for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("slice [{start}, {start}+{len}) out of range for last dimension {dim}")]
    BadSlice { start: usize, len: usize, dim: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cycle detected at node {0}")]
    CycleDetected(usize),
    #[error("parameter `{0}` registered twice on one tape")]
    DuplicateParameter(String),
    #[error("parameter `{0}` not present in the store")]
    UnknownParameter(String),
    #[error("ln of non-positive value {value:e} at element {index}")]
    LnDomain { value: f64, index: usize },
    #[error("embedding index {index} out of range for vocabulary of {vocab}")]
    IndexOutOfRange { index: usize, vocab: usize },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("empty input to {0}")]
    Empty(&'static str),
}

pub type TapeResult<T> = Result<T, TapeError>;

/// Dense row-major tensor of `f64` values. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }
}

/// Identifier of a node on one tape. Ids are not transferable between tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input, constant, or named parameter.
    Leaf,
    StopGradient,
    /// Forward identity; multiplies the incoming adjoint by `factor`.
    GradScale { factor: f64 },
    Add,
    Sub,
    Mul,
    MatMul,
    Concat { axis: usize },
    SliceLast { start: usize },
    Embed { indices: Vec<usize> },
    Sigmoid,
    Relu,
    Tanh,
    Sin,
    Cos,
    Exp,
    Ln,
    Abs,
    Power { exponent: f64 },
    Clamp { lo: f64, hi: f64 },
    Scale { factor: f64 },
    AddScalar,
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    Softmax { axis: usize },
}

/// One recorded operation: its output value, adjoint buffer, and provenance.
#[derive(Debug, Clone)]
pub struct TapeNode {
    shape: Vec<usize>,
    value: Vec<f64>,
    adjoint: Vec<f64>,
    parents: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name, in deterministic (sorted) order.
pub type GradientMap = BTreeMap<String, Tensor>;

/// A recorded forward pass. Build one per step and drop it afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    params: BTreeMap<String, NodeId>,
    /// Derivative cap for fractional powers at singular points.
    pub power_grad_cap: f64,
    // Finite-difference support: when replaying a build with perturbed
    // parameters, stop_gradient outputs are pinned to the base run's values
    // so the oracle differentiates the same function the tape declares.
    frozen_stop_grads: Option<std::collections::VecDeque<Vec<f64>>>,
    recorded_stop_grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            power_grad_cap: 1e6,
            frozen_stop_grads: None,
            recorded_stop_grads: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Adjoint buffer of a node; empty before `backward` has run.
    pub fn adjoint(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].adjoint
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, parents: Vec<usize>, op: Op) -> NodeId {
        let id = self.nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        let requires_grad = match op {
            Op::StopGradient => false,
            Op::Leaf => false, // overridden for parameters below
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(TapeNode {
            shape,
            value,
            adjoint: Vec::new(),
            parents,
            op,
            requires_grad,
        });
        NodeId(id)
    }

    // ----- leaves -----

    /// Non-trainable leaf holding batch data or other constants.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t.shape, t.data, vec![], Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a named trainable parameter from the store as a leaf.
    /// Each name may appear at most once per tape.
    pub fn param(&mut self, name: &str, store: &crate::params::ParamStore) -> TapeResult<NodeId> {
        let entry = store
            .get(name)
            .ok_or_else(|| TapeError::UnknownParameter(name.to_string()))?;
        if self.params.contains_key(name) {
            return Err(TapeError::DuplicateParameter(name.to_string()));
        }
        let id = self.push(
            entry.tensor.shape().to_vec(),
            entry.tensor.data().to_vec(),
            vec![],
            Op::Leaf,
        );
        self.nodes[id.0].requires_grad = entry.trainable;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Names and node ids of the parameters registered on this tape.
    pub fn registered_params(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    // ----- structural ops -----

    /// Forward identity; contributes zero adjoint to its parent.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = if let Some(q) = self.frozen_stop_grads.as_mut() {
            q.pop_front()
                .expect("frozen stop_gradient replay exhausted")
        } else {
            self.nodes[x.0].value.clone()
        };
        self.recorded_stop_grads.push(value.clone());
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, vec![x.0], Op::StopGradient)
    }

    /// Forward identity whose backward pass multiplies the adjoint by
    /// `factor`. Used to modulate gate gradients without touching values.
    pub fn grad_scale(&mut self, x: NodeId, factor: f64) -> TapeResult<NodeId> {
        if !factor.is_finite() {
            return Err(TapeError::NonFinite {
                what: format!("gradient scale factor {factor}"),
            });
        }
        let shape = self.nodes[x.0].shape.clone();
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape, value, vec![x.0], Op::GradScale { factor }))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, vec![x.0], op)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh, f64::tanh)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Cos, f64::cos)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp, f64::exp)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Abs, f64::abs)
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(&mut self, x: NodeId) -> TapeResult<NodeId> {
        if let Some((i, &v)) = self.nodes[x.0].value.iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(TapeError::LnDomain { value: v, index: i });
        }
        Ok(self.unary(x, Op::Ln, f64::ln))
    }

    /// Elementwise `x^p` for a fixed exponent.
    pub fn power(&mut self, x: NodeId, exponent: f64) -> NodeId {
        self.unary(x, Op::Power { exponent }, |v| v.powf(exponent))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, Op::Clamp { lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.unary(x, Op::Scale { factor }, |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: f64) -> NodeId {
        self.unary(x, Op::AddScalar, |v| v + offset)
    }

    /// `1 - x`, the complement used by convex blends.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    // ----- broadcasting binary ops -----

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> TapeResult<NodeId> {
        let (out_shape, ia, ib) = broadcast_plan(
            &self.nodes[a.0].shape,
            &self.nodes[b.0].shape,
            name,
        )?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n: usize = out_shape.iter().product();
        let mut value = Vec::with_capacity(n);
        for i in 0..n {
            value.push(f(av[ia.map(i)], bv[ib.map(i)]));
        }
        Ok(self.push(out_shape, value, vec![a.0, b.0], op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> TapeResult<NodeId> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> TapeResult<NodeId> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    /// Elementwise (Hadamard) product with numpy-style broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TapeResult<NodeId> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    /// 2-d matrix product `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TapeResult<NodeId> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let crow = &mut value[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(vec![m, n], value, vec![a.0, b.0], Op::MatMul))
    }

    /// Concatenates equal-rank tensors along `axis`.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> TapeResult<NodeId> {
        if parts.is_empty() {
            return Err(TapeError::Empty("concat"));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TapeError::BadAxis { op: "concat", axis, shape: first });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let sh = &self.nodes[p.0].shape;
            if sh.len() != first.len()
                || sh.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TapeError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: sh.clone(),
                });
            }
            out_shape[axis] += sh[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut value = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &p in parts {
            let sh = &self.nodes[p.0].shape;
            let len = sh[axis];
            let pv = &self.nodes[p.0].value;
            for o in 0..outer {
                let src = &pv[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * total_axis + offset) * inner;
                value[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let parents = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out_shape, value, parents, Op::Concat { axis }))
    }

    /// Selects `[start, start+len)` along the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> TapeResult<NodeId> {
        let sh = self.nodes[x.0].shape.clone();
        if sh.is_empty() {
            return Err(TapeError::BadAxis { op: "slice_last", axis: 0, shape: sh });
        }
        let dim = *sh.last().unwrap();
        if start + len > dim {
            return Err(TapeError::BadSlice { start, len, dim });
        }
        let rows: usize = sh[..sh.len() - 1].iter().product();
        let xv = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&xv[r * dim + start..r * dim + start + len]);
        }
        let mut out_shape = sh;
        *out_shape.last_mut().unwrap() = len;
        Ok(self.push(out_shape, value, vec![x.0], Op::SliceLast { start }))
    }

    /// Row lookup: gathers `indices` rows of a `[vocab x dim]` table.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> TapeResult<NodeId> {
        let sh = self.nodes[table.0].shape.clone();
        if sh.len() != 2 {
            return Err(TapeError::ShapeMismatch {
                op: "embed",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (vocab, dim) = (sh[0], sh[1]);
        let tv = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(indices.len() * dim);
        for &idx in indices {
            if idx >= vocab {
                return Err(TapeError::IndexOutOfRange { index: idx, vocab });
            }
            value.extend_from_slice(&tv[idx * dim..(idx + 1) * dim]);
        }
        let b = indices.len();
        Ok(self.push(
            vec![b, dim],
            value,
            vec![table.0],
            Op::Embed { indices: indices.to_vec() },
        ))
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(vec![], vec![s], vec![x.0], Op::SumAll)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len() as f64;
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(vec![], vec![s / n], vec![x.0], Op::MeanAll)
    }

    /// Sums along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> TapeResult<NodeId> {
        let sh = self.nodes[x.0].shape.clone();
        if axis >= sh.len() {
            return Err(TapeError::BadAxis { op: "sum_axis", axis, shape: sh });
        }
        let outer: usize = sh[..axis].iter().product();
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    value[o * inner + i] += xv[(o * len + l) * inner + i];
                }
            }
        }
        let mut out_shape = sh;
        out_shape[axis] = 1;
        Ok(self.push(out_shape, value, vec![x.0], Op::SumAxis { axis }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> TapeResult<NodeId> {
        let sh = self.nodes[x.0].shape.clone();
        if sh.is_empty() || axis >= sh.len() {
            return Err(TapeError::BadAxis { op: "softmax", axis, shape: sh });
        }
        let outer: usize = sh[..axis].iter().product();
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(xv[at(l)]);
                }
                let mut denom = 0.0;
                for l in 0..len {
                    let e = (xv[at(l)] - max).exp();
                    value[at(l)] = e;
                    denom += e;
                }
                for l in 0..len {
                    value[at(l)] /= denom;
                }
            }
        }
        Ok(self.push(sh, value, vec![x.0], Op::Softmax { axis }))
    }

    // ----- backward -----

    /// Reverse pass from a scalar loss. Returns the gradient of every
    /// registered trainable parameter (zeros for parameters the loss does
    /// not reach).
    pub fn backward(&mut self, loss: NodeId) -> TapeResult<GradientMap> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TapeError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        // Append-only construction should make cycles impossible; verify the
        // topological invariant anyway since backward relies on it.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.parents.iter().any(|&p| p >= i) {
                return Err(TapeError::CycleDetected(i));
            }
        }
        for node in &mut self.nodes {
            node.adjoint = vec![0.0; node.value.len()];
        }
        self.nodes[loss.0].adjoint[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if self.nodes[i].adjoint.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.propagate(i)?;
        }

        let mut grads = GradientMap::new();
        for (name, id) in &self.params {
            if self.nodes[id.0].requires_grad {
                grads.insert(
                    name.clone(),
                    Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].adjoint.clone()),
                );
            }
        }
        Ok(grads)
    }

    fn propagate(&mut self, i: usize) -> TapeResult<()> {
        let node = &self.nodes[i];
        let parents = node.parents.clone();
        let op = node.op.clone();
        let g = std::mem::take(&mut self.nodes[i].adjoint);
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::GradScale { factor } => {
                let pa = &mut self.nodes[parents[0]].adjoint;
                for (d, &gi) in pa.iter_mut().zip(&g) {
                    *d += factor * gi;
                }
            }
            Op::Add | Op::Sub => {
                let (out_shape, ia, ib) = broadcast_plan(
                    &self.nodes[parents[0]].shape,
                    &self.nodes[parents[1]].shape,
                    "add",
                )?;
                let n: usize = out_shape.iter().product();
                let sign = if matches!(op, Op::Sub) { -1.0 } else { 1.0 };
                for idx in 0..n {
                    self.nodes[parents[0]].adjoint[ia.map(idx)] += g[idx];
                }
                for idx in 0..n {
                    self.nodes[parents[1]].adjoint[ib.map(idx)] += sign * g[idx];
                }
            }
            Op::Mul => {
                let (out_shape, ia, ib) = broadcast_plan(
                    &self.nodes[parents[0]].shape,
                    &self.nodes[parents[1]].shape,
                    "mul",
                )?;
                let n: usize = out_shape.iter().product();
                let av = self.nodes[parents[0]].value.clone();
                let bv = self.nodes[parents[1]].value.clone();
                for idx in 0..n {
                    self.nodes[parents[0]].adjoint[ia.map(idx)] += g[idx] * bv[ib.map(idx)];
                }
                for idx in 0..n {
                    self.nodes[parents[1]].adjoint[ib.map(idx)] += g[idx] * av[ia.map(idx)];
                }
            }
            Op::MatMul => {
                let (m, k) = {
                    let s = &self.nodes[parents[0]].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[parents[1]].shape[1];
                let av = self.nodes[parents[0]].value.clone();
                let bv = self.nodes[parents[1]].value.clone();
                {
                    let da = &mut self.nodes[parents[0]].adjoint;
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                {
                    let db = &mut self.nodes[parents[1]].adjoint;
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Concat { axis } => {
                let out_shape = self.nodes[i].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let mut offset = 0;
                for &p in &parents {
                    let len = self.nodes[p].shape[axis];
                    let pa = &mut self.nodes[p].adjoint;
                    for o in 0..outer {
                        let src_start = (o * total_axis + offset) * inner;
                        let dst = &mut pa[o * len * inner..(o + 1) * len * inner];
                        for (d, &gi) in dst.iter_mut().zip(&g[src_start..src_start + len * inner]) {
                            *d += gi;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceLast { start } => {
                let dim = *self.nodes[parents[0]].shape.last().unwrap();
                let len = *self.nodes[i].shape.last().unwrap();
                let rows = g.len() / len;
                let pa = &mut self.nodes[parents[0]].adjoint;
                for r in 0..rows {
                    for j in 0..len {
                        pa[r * dim + start + j] += g[r * len + j];
                    }
                }
            }
            Op::Embed { indices } => {
                let dim = self.nodes[parents[0]].shape[1];
                let pa = &mut self.nodes[parents[0]].adjoint;
                for (b, &idx) in indices.iter().enumerate() {
                    for j in 0..dim {
                        pa[idx * dim + j] += g[b * dim + j];
                    }
                }
            }
            Op::Sigmoid => {
                let yv = self.nodes[i].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &y) in pa.iter_mut().zip(&g).zip(&yv) {
                    *d += gi * y * (1.0 - y);
                }
            }
            Op::Relu => {
                let xv = self.nodes[parents[0]].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &x) in pa.iter_mut().zip(&g).zip(&xv) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Tanh => {
                let yv = self.nodes[i].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &y) in pa.iter_mut().zip(&g).zip(&yv) {
                    *d += gi * (1.0 - y * y);
                }
            }
            Op::Sin => {
                let xv = self.nodes[parents[0]].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &x) in pa.iter_mut().zip(&g).zip(&xv) {
                    *d += gi * x.cos();
                }
            }
            Op::Cos => {
                let xv = self.nodes[parents[0]].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &x) in pa.iter_mut().zip(&g).zip(&xv) {
                    *d -= gi * x.sin();
                }
            }
            Op::Exp => {
                let yv = self.nodes[i].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &y) in pa.iter_mut().zip(&g).zip(&yv) {
                    *d += gi * y;
                }
            }
            Op::Ln => {
                let xv = self.nodes[parents[0]].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &x) in pa.iter_mut().zip(&g).zip(&xv) {
                    *d += gi / x;
                }
            }
            Op::Abs => {
                // d|x|/dx at 0 is defined as 0.
                let xv = self.nodes[parents[0]].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &x) in pa.iter_mut().zip(&g).zip(&xv) {
                    *d += gi * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::Power { exponent } => {
                let cap = self.power_grad_cap;
                let xv = self.nodes[parents[0]].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &x) in pa.iter_mut().zip(&g).zip(&xv) {
                    let mut slope = exponent * x.powf(exponent - 1.0);
                    if !slope.is_finite() {
                        slope = if slope.is_nan() {
                            0.0
                        } else if slope > 0.0 {
                            cap
                        } else {
                            -cap
                        };
                    }
                    *d += gi * slope;
                }
            }
            Op::Clamp { lo, hi } => {
                let xv = self.nodes[parents[0]].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for ((d, &gi), &x) in pa.iter_mut().zip(&g).zip(&xv) {
                    if x >= lo && x <= hi {
                        *d += gi;
                    }
                }
            }
            Op::Scale { factor } => {
                let pa = &mut self.nodes[parents[0]].adjoint;
                for (d, &gi) in pa.iter_mut().zip(&g) {
                    *d += factor * gi;
                }
            }
            Op::AddScalar => {
                let pa = &mut self.nodes[parents[0]].adjoint;
                for (d, &gi) in pa.iter_mut().zip(&g) {
                    *d += gi;
                }
            }
            Op::SumAll => {
                let gi = g[0];
                let pa = &mut self.nodes[parents[0]].adjoint;
                for d in pa.iter_mut() {
                    *d += gi;
                }
            }
            Op::MeanAll => {
                let pa = &mut self.nodes[parents[0]].adjoint;
                let gi = g[0] / pa.len() as f64;
                for d in pa.iter_mut() {
                    *d += gi;
                }
            }
            Op::SumAxis { axis } => {
                let sh = self.nodes[parents[0]].shape.clone();
                let outer: usize = sh[..axis].iter().product();
                let len = sh[axis];
                let inner: usize = sh[axis + 1..].iter().product();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            pa[(o * len + l) * inner + j] += g[o * inner + j];
                        }
                    }
                }
            }
            Op::Softmax { axis } => {
                let sh = self.nodes[i].shape.clone();
                let outer: usize = sh[..axis].iter().product();
                let len = sh[axis];
                let inner: usize = sh[axis + 1..].iter().product();
                let yv = self.nodes[i].value.clone();
                let pa = &mut self.nodes[parents[0]].adjoint;
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g[at(l)] * yv[at(l)];
                        }
                        for l in 0..len {
                            pa[at(l)] += (g[at(l)] - dot) * yv[at(l)];
                        }
                    }
                }
            }
        }
        self.nodes[i].adjoint = g;
        Ok(())
    }

    // ----- finite-difference support -----

    pub(crate) fn take_stop_grad_log(&mut self) -> Vec<Vec<f64>> {
        std::mem::take(&mut self.recorded_stop_grads)
    }

    pub(crate) fn with_frozen_stop_grads(values: Vec<Vec<f64>>) -> Self {
        let mut t = Tape::new();
        t.frozen_stop_grads = Some(values.into());
        t
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index translator from a broadcast output offset to a parent offset.
/// Rank <= 2 is the hot path; higher ranks fall back to digit decomposition.
#[derive(Debug, Clone)]
pub(crate) struct IndexMap {
    out_shape: Vec<usize>,
    strides: Vec<usize>,
}

impl IndexMap {
    #[inline]
    fn map(&self, mut idx: usize) -> usize {
        match self.out_shape.len() {
            0 => 0,
            1 => idx * self.strides[0],
            2 => {
                let cols = self.out_shape[1];
                (idx / cols) * self.strides[0] + (idx % cols) * self.strides[1]
            }
            _ => {
                let mut off = 0;
                for d in (0..self.out_shape.len()).rev() {
                    let dim = self.out_shape[d];
                    off += (idx % dim) * self.strides[d];
                    idx /= dim;
                }
                off
            }
        }
    }
}

/// Computes the broadcast output shape and per-operand index maps.
/// Shapes align on trailing axes; each axis must match or be 1.
fn broadcast_plan(
    a: &[usize],
    b: &[usize],
    op: &'static str,
) -> TapeResult<(Vec<usize>, IndexMap, IndexMap)> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ad = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let bd = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = if ad == bd || bd == 1 {
            ad
        } else if ad == 1 {
            bd
        } else {
            return Err(TapeError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    let strides_for = |sh: &[usize]| {
        let mut native = vec![0usize; sh.len()];
        let mut acc = 1;
        for d in (0..sh.len()).rev() {
            native[d] = acc;
            acc *= sh[d];
        }
        let mut s = vec![0usize; rank];
        for d in 0..rank {
            if d + sh.len() >= rank {
                let sd = sh[d + sh.len() - rank];
                s[d] = if sd == 1 { 0 } else { native[d + sh.len() - rank] };
            }
        }
        s
    };
    let ia = IndexMap { out_shape: out.clone(), strides: strides_for(a) };
    let ib = IndexMap { out_shape: out.clone(), strides: strides_for(b) };
    Ok((out, ia, ib))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn store_with(pairs: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, t) in pairs {
            s.insert(name, t.clone());
        }
        s
    }

    #[test]
    fn identity_loss_has_unit_gradient() {
        let store = store_with(&[("p", Tensor::scalar(2.5))]);
        let mut tape = Tape::new();
        let p = tape.param("p", &store).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads["p"].data(), &[1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let store = store_with(&[("p", Tensor::scalar(0.0))]);
        let mut tape = Tape::new();
        let p = tape.param("p", &store).unwrap();
        let y = tape.sigmoid(p);
        let grads = tape.backward(y).unwrap();
        assert!((grads["p"].data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stop_gradient_detaches() {
        let store = store_with(&[("p", Tensor::scalar(3.0))]);
        let mut tape = Tape::new();
        let p = tape.param("p", &store).unwrap();
        let frozen = tape.stop_gradient(p);
        let grads = tape.backward(frozen).unwrap();
        assert_eq!(grads["p"].data(), &[0.0]);
    }

    #[test]
    fn product_with_frozen_factor() {
        // p * stop_gradient(p) at p = 3: value 9, gradient 3.
        let store = store_with(&[("p", Tensor::scalar(3.0))]);
        let mut tape = Tape::new();
        let p = tape.param("p", &store).unwrap();
        let frozen = tape.stop_gradient(p);
        let y = tape.mul(p, frozen).unwrap();
        assert_eq!(tape.value(y), &[9.0]);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["p"].data(), &[3.0]);
    }

    #[test]
    fn frozen_scale_times_gate() {
        // stop_gradient(c) * g with c = 2, g = 0.3: value 0.6, grad(g) = 2.
        let store = store_with(&[("g", Tensor::scalar(0.3))]);
        let mut tape = Tape::new();
        let c = tape.scalar(2.0);
        let frozen = tape.stop_gradient(c);
        let g = tape.param("g", &store).unwrap();
        let y = tape.mul(frozen, g).unwrap();
        assert!((tape.value(y)[0] - 0.6).abs() < 1e-15);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["g"].data(), &[2.0]);
    }

    #[test]
    fn stop_gradient_is_forward_identity_bitwise() {
        let vals = vec![0.1, -2.75, 1e-300, 3.13];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vals.clone()));
        let y = tape.stop_gradient(x);
        assert!(tape
            .value(y)
            .iter()
            .zip(&vals)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn hadamard_and_analytic_unary_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let h = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(h), &[3.0, 8.0]);

        let store = store_with(&[("x", Tensor::scalar(0.0))]);
        let mut tape = Tape::new();
        let x = tape.param("x", &store).unwrap();
        let s = tape.sin(x);
        assert_eq!(tape.value(s), &[0.0]);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0]);

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let sm = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(sm), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_reports_offending_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        match tape.add(a, b) {
            Err(TapeError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(TapeError::NonScalarLoss(_))));
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let store = store_with(&[("p", Tensor::scalar(1.0))]);
        let mut tape = Tape::new();
        tape.param("p", &store).unwrap();
        assert!(matches!(
            tape.param("p", &store),
            Err(TapeError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.ln(x), Err(TapeError::LnDomain { .. })));
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let store = store_with(&[("used", Tensor::scalar(1.0)), ("unused", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let u = tape.param("used", &store).unwrap();
        tape.param("unused", &store).unwrap();
        let y = tape.scale(u, 4.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["used"].data(), &[4.0]);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_manual() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]));
        let row = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let col = tape.constant(Tensor::matrix(2, 1, vec![10.0, 20.0]));
        let xr = tape.add(x, row).unwrap();
        assert_eq!(tape.value(xr), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let xc = tape.mul(x, col).unwrap();
        assert_eq!(tape.value(xc), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn grad_scale_forward_identity_backward_scaled() {
        let store = store_with(&[("g", Tensor::scalar(0.7))]);
        let mut tape = Tape::new();
        let g = tape.param("g", &store).unwrap();
        let scaled = tape.grad_scale(g, 0.25).unwrap();
        assert_eq!(
            tape.value(scaled)[0].to_bits(),
            tape.value(g)[0].to_bits()
        );
        let y = tape.scale(scaled, 3.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["g"].data(), &[0.75]);
        assert!(matches!(
            Tape::new().grad_scale(g, f64::NAN),
            Err(TapeError::NonFinite { .. })
        ));
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let store = store_with(&[
            ("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0])),
            ("b", Tensor::matrix(2, 1, vec![5.0, 6.0])),
        ]);
        let mut tape = Tape::new();
        let a = tape.param("a", &store).unwrap();
        let b = tape.param("b", &store).unwrap();
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let right = tape.slice_last(cat, 2, 1).unwrap();
        let loss = tape.sum_all(right);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["a"].data(), &[0.0; 4]);
        assert_eq!(grads["b"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let store = store_with(&[("table", Tensor::matrix(3, 2, vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]))]);
        let mut tape = Tape::new();
        let table = tape.param("table", &store).unwrap();
        let e = tape.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let loss = tape.sum_all(e);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["table"].data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let mut tape = Tape::new();
        let table = tape.param("table", &store).unwrap();
        assert!(matches!(
            tape.embed(table, &[3]),
            Err(TapeError::IndexOutOfRange { index: 3, vocab: 3 })
        ));
    }

    #[test]
    fn softmax_axis_backward_sums_to_zero() {
        let store = store_with(&[("x", Tensor::matrix(2, 3, vec![0.3, -1.0, 0.5, 2.0, 0.0, -0.7]))]);
        let mut tape = Tape::new();
        let x = tape.param("x", &store).unwrap();
        let sm = tape.softmax(x, 1).unwrap();
        let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.3, 0.9, -1.1]));
        let prod = tape.mul(sm, w).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        // Softmax rows sum to one, so the gradient of each row sums to zero.
        let gd = grads["x"].data();
        for r in 0..2 {
            let s: f64 = gd[r * 3..(r + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-12, "row {r} gradient sum {s}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let store = store_with(&[("w", Tensor::matrix(2, 2, vec![0.3, -0.4, 0.9, 0.11]))]);
        let run = || {
            let mut tape = Tape::new();
            let w = tape.param("w", &store).unwrap();
            let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, -0.5, 0.25]));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h);
            let loss = tape.mean_all(a);
            let g = tape.backward(loss).unwrap();
            (tape.value(loss).to_vec(), g["w"].data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let store = store_with(&[("w", Tensor::vector(vec![0.5, -1.25, 2.0]))]);
        let build = |tape: &mut Tape, store: &ParamStore| {
            let w = tape.param("w", store).unwrap();
            let s = tape.sin(w);
            let l1 = tape.sum_all(s);
            let sq = tape.mul(w, w).unwrap();
            let l2 = tape.mean_all(sq);
            (l1, l2)
        };
        let (a, b) = (1.7, -0.6);
        let mut t1 = Tape::new();
        let (l1, _) = build(&mut t1, &store);
        let g1 = t1.backward(l1).unwrap();
        let mut t2 = Tape::new();
        let (_, l2) = build(&mut t2, &store);
        let g2 = t2.backward(l2).unwrap();
        let mut t3 = Tape::new();
        let (l1c, l2c) = build(&mut t3, &store);
        let s1 = t3.scale(l1c, a);
        let s2 = t3.scale(l2c, b);
        let combined = t3.add(s1, s2).unwrap();
        let g3 = t3.backward(combined).unwrap();
        for i in 0..3 {
            let expect = a * g1["w"].data()[i] + b * g2["w"].data()[i];
            assert!((g3["w"].data()[i] - expect).abs() < 1e-12);
        }
    }
}
