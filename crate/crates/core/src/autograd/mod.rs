//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its value. [`Tape::grad`] walks the
//! tape backwards and expresses each vector-Jacobian product with ordinary
//! tape operations, so the gradients it returns are themselves nodes that can
//! be differentiated again. That is what makes penalties on input gradients
//! (double backward) possible.
//!
//! The operation set is closed under differentiation: the adjoint of every op
//! is built from ops in the same set.

pub mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use kernels::ConvGeom;

/// Floating-point element type of a tape.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + AddAssign + MulAssign + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    /// The adjacent representable value in the direction of `target`.
    fn step_toward(self, target: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $sign:expr) => {
        impl Real for $t {
            fn step_toward(self, target: Self) -> Self {
                if self == target || self.is_nan() || target.is_nan() {
                    return target;
                }
                let up = target > self;
                let bits = if self == 0.0 {
                    if up { 1 } else { $sign | 1 }
                } else if (self > 0.0) == up {
                    self.to_bits() + 1
                } else {
                    self.to_bits() - 1
                };
                <$t>::from_bits(bits)
            }
        }
    };
}

impl_real!(f32, 0x8000_0000u32);
impl_real!(f64, 0x8000_0000_0000_0000u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("no tape to differentiate: {0}")]
    NoTape(String),
}

type Result<T> = std::result::Result<T, AutogradError>;

/// An owned dense tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Rc<Vec<T>>),
    Relu(NodeId),
    Sum(NodeId),
    /// Scalar broadcast to the node's shape.
    Broadcast(NodeId),
    Reshape(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    /// `[n, c, ...] -> [c]`
    ChannelSum(NodeId),
    /// `[c] -> [n, c, ...]`
    ChannelBroadcast(NodeId),
    /// `x[n, c, ...] + b[c]`
    AddChannel(NodeId, NodeId),
    Conv(NodeId, NodeId, ConvGeom),
    ConvTranspose(NodeId, NodeId, ConvGeom),
    ConvWeightGrad(NodeId, NodeId, ConvGeom),
    Gather(NodeId, Rc<Vec<u32>>),
    Scatter(NodeId, Rc<Vec<u32>>),
    LogSoftmax(NodeId),
    Softmax(NodeId),
    RowSumBroadcast(NodeId),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddChannel(a, b) => vec![a, b],
            MatMul { a, b, .. } => vec![a, b],
            Conv(a, b, _) | ConvTranspose(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Scale(a, _) | MulConst(a, _) | Relu(a) | Sum(a) | Broadcast(a) | Reshape(a) => vec![a],
            ChannelSum(a) | ChannelBroadcast(a) | Gather(a, _) | Scatter(a, _) => vec![a],
            LogSoftmax(a) | Softmax(a) | RowSumBroadcast(a) => vec![a],
        }
    }
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// An append-only record of values and the operations that produced them.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutogradError {
    AutogradError::ShapeMismatch { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copies a node out as an owned tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, name: &'static str, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Result<NodeId> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        // x - x is NaN exactly for non-finite x; the branch-free fold vectorizes.
        #[allow(clippy::eq_op)]
        let all_finite = value.iter().fold(true, |ok, &v| ok & ((v - v) == T::zero()));
        if !all_finite {
            let index = value.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(AutogradError::NonFinite { op: name, index });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        let id = self.push("leaf", tensor.data, tensor.shape, Op::Leaf)?;
        self.nodes[id.0].requires_grad = requires_grad;
        Ok(id)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<NodeId> {
        self.leaf(tensor, false)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, value, shape, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", value, shape, Op::Scale(a, c))
    }

    /// Elementwise product with a constant (non-differentiable) tensor.
    pub fn mul_const(&mut self, a: NodeId, c: Rc<Vec<T>>) -> Result<NodeId> {
        if c.len() != self.value(a).len() {
            return Err(mismatch("mul_const", format!("{} vs {}", self.value(a).len(), c.len())));
        }
        let value = self.value(a).iter().zip(c.iter()).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_const", value, shape, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", value, shape, Op::Relu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", vec![s], vec![1], Op::Sum(a))
    }

    fn broadcast(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if self.value(a).len() != 1 {
            return Err(mismatch("broadcast", format!("source {:?} is not a scalar", self.shape(a))));
        }
        let v = self.value(a)[0];
        let n = shape.iter().product();
        self.push("broadcast", vec![v; n], shape, Op::Broadcast(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        self.push("reshape", value, shape, Op::Reshape(a))
    }

    fn matrix_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match *self.shape(id) {
            [r, c] => Ok((r, c)),
            ref s => Err(mismatch(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `op(a) · op(b)` for 2D nodes, `op` being an optional transpose.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let (ar, ac) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(mismatch("matmul", format!("inner dims {inner_a} vs {inner_b}")));
        }
        let (m, n, value) = kernels::matmul(self.value(a), ar, ac, ta, self.value(b), br, bc, tb);
        self.push("matmul", value, vec![m, n], Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    fn channel_layout(&self, op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() < 2 {
            return Err(mismatch(op, format!("need [n, c, ...], got {shape:?}")));
        }
        Ok((shape[0], shape[1], shape[2..].iter().product()))
    }

    pub fn channel_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, c, inner) = self.channel_layout("channel_sum", self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![T::zero(); c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                *o += x[(b * c + ch) * inner..][..inner].iter().fold(T::zero(), |s, &v| s + v);
            }
        }
        self.push("channel_sum", out, vec![c], Op::ChannelSum(a))
    }

    /// Broadcasts a per-channel vector to `shape = [n, c, ...]`.
    pub fn channel_broadcast(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let (n, c, inner) = self.channel_layout("channel_broadcast", &shape)?;
        if self.shape(a) != [c] {
            return Err(mismatch("channel_broadcast", format!("{:?} into {shape:?}", self.shape(a))));
        }
        let bias = self.value(a);
        let mut out = Vec::with_capacity(n * c * inner);
        for _ in 0..n {
            for &bv in bias {
                out.extend(std::iter::repeat_n(bv, inner));
            }
        }
        self.push("channel_broadcast", out, shape, Op::ChannelBroadcast(a))
    }

    /// Adds a per-channel bias `[c]` to `x[n, c, ...]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (_, c, inner) = self.channel_layout("add_bias", &shape)?;
        if self.shape(bias) != [c] {
            return Err(mismatch("add_bias", format!("{:?} onto {shape:?}", self.shape(bias))));
        }
        let bv = self.value(bias);
        let mut value = self.value(x).to_vec();
        for (i, chunk) in value.chunks_exact_mut(inner).enumerate() {
            let b = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push("add_bias", value, shape, Op::AddChannel(x, bias))
    }

    fn conv_geom(&self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 5 || ws.len() != 5 {
            return Err(mismatch("conv3d", format!("input {xs:?}, weight {ws:?}")));
        }
        let k = ws[2];
        if ws[3] != k || ws[4] != k || ws[1] != xs[1] {
            return Err(mismatch("conv3d", format!("input {xs:?}, weight {ws:?}")));
        }
        ConvGeom::new(xs[0], xs[1], ws[0], k, stride, pad, [xs[2], xs[3], xs[4]])
            .ok_or_else(|| mismatch("conv3d", format!("kernel {k} does not fit input {xs:?} with padding {pad}")))
    }

    /// 3D convolution without bias.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let g = self.conv_geom(x, w, stride, pad)?;
        let value = kernels::conv3d(&g, self.value(x), self.value(w));
        self.push("conv3d", value, g.output_shape(), Op::Conv(x, w, g))
    }

    fn conv_transpose(&mut self, gy: NodeId, w: NodeId, g: ConvGeom) -> Result<NodeId> {
        let value = kernels::conv3d_transpose(&g, self.value(gy), self.value(w));
        self.push("conv3d_transpose", value, g.input_shape(), Op::ConvTranspose(gy, w, g))
    }

    fn conv_weight_grad(&mut self, x: NodeId, gy: NodeId, g: ConvGeom) -> Result<NodeId> {
        let value = kernels::conv3d_weight_grad(&g, self.value(x), self.value(gy));
        self.push("conv3d_weight_grad", value, g.weight_shape(), Op::ConvWeightGrad(x, gy, g))
    }

    fn conv_with_geom(&mut self, x: NodeId, w: NodeId, g: ConvGeom) -> Result<NodeId> {
        let value = kernels::conv3d(&g, self.value(x), self.value(w));
        self.push("conv3d", value, g.output_shape(), Op::Conv(x, w, g))
    }

    pub fn maxpool3d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 || window == 0 || shape[2..].iter().any(|&d| d < window) {
            return Err(mismatch("maxpool3d", format!("window {window} on {shape:?}")));
        }
        let (out_shape, idx) = kernels::maxpool3d_indices(self.value(x), &shape, window);
        self.gather(x, Rc::new(idx), out_shape)
    }

    fn gather(&mut self, x: NodeId, idx: Rc<Vec<u32>>, shape: Vec<usize>) -> Result<NodeId> {
        let src = self.value(x);
        let value = idx.iter().map(|&i| src[i as usize]).collect();
        self.push("gather", value, shape, Op::Gather(x, idx))
    }

    fn scatter(&mut self, g: NodeId, idx: Rc<Vec<u32>>, shape: Vec<usize>) -> Result<NodeId> {
        let mut out = vec![T::zero(); shape.iter().product()];
        for (&i, &v) in idx.iter().zip(self.value(g)) {
            out[i as usize] += v;
        }
        self.push("scatter", out, shape, Op::Scatter(g, idx))
    }

    fn last_dim(&self, op: &'static str, a: NodeId) -> Result<usize> {
        self.shape(a)
            .last()
            .copied()
            .filter(|&c| c > 0)
            .ok_or_else(|| mismatch(op, "empty shape".into()))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let cols = self.last_dim("log_softmax", a)?;
        let value = kernels::log_softmax_rows(self.value(a), cols);
        let shape = self.shape(a).to_vec();
        self.push("log_softmax", value, shape, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let cols = self.last_dim("softmax", a)?;
        let value = kernels::softmax_rows(self.value(a), cols);
        let shape = self.shape(a).to_vec();
        self.push("softmax", value, shape, Op::Softmax(a))
    }

    fn row_sum_broadcast(&mut self, a: NodeId) -> Result<NodeId> {
        let cols = self.last_dim("row_sum", a)?;
        let mut value = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks_exact(cols) {
            let s = row.iter().fold(T::zero(), |acc, &v| acc + v);
            value.extend(std::iter::repeat_n(s, cols));
        }
        let shape = self.shape(a).to_vec();
        self.push("row_sum", value, shape, Op::RowSumBroadcast(a))
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    ///
    /// The returned nodes live on the tape and can be differentiated again.
    /// A `wrt` node the loss does not depend on gets a zero constant.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if loss.0 >= self.nodes.len() {
            return Err(AutogradError::NoTape(format!("node {} does not exist", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(AutogradError::NoTape(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        // relevant[i]: node i is, or depends on, one of `wrt`.
        let mut relevant = vec![false; end];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for i in 0..end {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.parents().iter().any(|p| relevant[p.0]);
            }
        }
        if !self.nodes[loss.0].requires_grad && !wrt.contains(&loss) {
            return Err(AutogradError::NoTape("loss does not depend on any tensor requiring grad".into()));
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        grads[loss.0] = Some(self.constant(Tensor {
            shape: self.shape(loss).to_vec(),
            data: vec![T::one()],
        })?);

        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !relevant[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contributions = self.vjp(NodeId(i), g, &relevant)?;
            for (parent, contrib) in contributions {
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(existing) => self.add(existing, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    self.constant(Tensor::zeros(shape))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`,
    /// restricted to relevant parents.
    fn vjp(&mut self, id: NodeId, g: NodeId, relevant: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let need = |p: NodeId| relevant[p.0];
        let op = self.nodes[id.0].op.clone();
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, self.scale(g, -T::one())?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if need(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => {
                if need(a) {
                    out.push((a, self.scale(g, c)?));
                }
            }
            Op::MulConst(a, m) => {
                if need(a) {
                    out.push((a, self.mul_const(g, m)?));
                }
            }
            Op::Relu(a) => {
                if need(a) {
                    let mask: Vec<T> = self
                        .value(a)
                        .iter()
                        .map(|&x| if x > T::zero() { T::one() } else { T::zero() })
                        .collect();
                    out.push((a, self.mul_const(g, Rc::new(mask))?));
                }
            }
            Op::Sum(a) => {
                if need(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.broadcast(g, shape)?));
                }
            }
            Op::Broadcast(a) => {
                if need(a) {
                    let s = self.sum(g)?;
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.reshape(s, shape)?));
                }
            }
            Op::Reshape(a) => {
                if need(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.reshape(g, shape)?));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                // C = op(A) op(B)
                if need(a) {
                    let da = if ta {
                        self.matmul_t(b, tb, g, true)?
                    } else {
                        self.matmul_t(g, false, b, !tb)?
                    };
                    out.push((a, da));
                }
                if need(b) {
                    let db = if tb {
                        self.matmul_t(g, true, a, ta)?
                    } else {
                        self.matmul_t(a, !ta, g, false)?
                    };
                    out.push((b, db));
                }
            }
            Op::ChannelSum(a) => {
                if need(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.channel_broadcast(g, shape)?));
                }
            }
            Op::AddChannel(x, b) => {
                if need(x) {
                    out.push((x, g));
                }
                if need(b) {
                    out.push((b, self.channel_sum(g)?));
                }
            }
            Op::ChannelBroadcast(a) => {
                if need(a) {
                    out.push((a, self.channel_sum(g)?));
                }
            }
            Op::Conv(x, w, geom) => {
                if need(x) {
                    out.push((x, self.conv_transpose(g, w, geom)?));
                }
                if need(w) {
                    out.push((w, self.conv_weight_grad(x, g, geom)?));
                }
            }
            Op::ConvTranspose(gy, w, geom) => {
                // y = A_w^T gy
                if need(gy) {
                    out.push((gy, self.conv_with_geom(g, w, geom)?));
                }
                if need(w) {
                    out.push((w, self.conv_weight_grad(g, gy, geom)?));
                }
            }
            Op::ConvWeightGrad(x, gy, geom) => {
                // <G, dW(x, gy)> = <gy, conv(x, G)>
                if need(gy) {
                    out.push((gy, self.conv_with_geom(x, g, geom)?));
                }
                if need(x) {
                    out.push((x, self.conv_transpose(gy, g, geom)?));
                }
            }
            Op::Gather(a, idx) => {
                if need(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.scatter(g, idx, shape)?));
                }
            }
            Op::Scatter(a, idx) => {
                if need(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.gather(g, idx, shape)?));
                }
            }
            Op::LogSoftmax(a) => {
                if need(a) {
                    // dz = g - softmax(z) * rowsum(g)
                    let s = self.softmax(a)?;
                    let rs = self.row_sum_broadcast(g)?;
                    let t = self.mul(s, rs)?;
                    out.push((a, self.sub(g, t)?));
                }
            }
            Op::Softmax(a) => {
                if need(a) {
                    // dz = s * (g - rowsum(g * s))
                    let gs = self.mul(g, id)?;
                    let rs = self.row_sum_broadcast(gs)?;
                    let d = self.sub(g, rs)?;
                    out.push((a, self.mul(id, d)?));
                }
            }
            Op::RowSumBroadcast(a) => {
                if need(a) {
                    out.push((a, self.row_sum_broadcast(g)?));
                }
            }
        }
        Ok(out)
    }

    /// Gradient values of `loss` for every leaf that requires grad.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let leaves: Vec<NodeId> = (0..=loss.0.min(self.nodes.len().saturating_sub(1)))
            .filter(|&i| self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf))
            .map(NodeId)
            .collect();
        let grads = self.grad(loss, &leaves)?;
        Ok(leaves
            .into_iter()
            .zip(grads)
            .map(|(leaf, g)| (leaf, self.tensor(g)))
            .collect())
    }
}
