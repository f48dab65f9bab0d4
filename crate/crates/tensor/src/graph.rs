//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and backward simply walks it in reverse.

use crate::conv::{self, ConvGeom, Padding};
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    ConvTranspose2d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    Dense { input: NodeId, weight: NodeId, bias: NodeId },
    BiasAdd { input: NodeId, bias: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Prelu { input: NodeId, slope: NodeId },
    GlobalAvgPool(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Concat(NodeId, NodeId),
    Mse(NodeId, NodeId),
    SumAll(NodeId),
    ChannelMul { input: NodeId, scales: NodeId },
    RowNormalize { input: NodeId, target: T, floor: T },
    ComplexMul(NodeId, NodeId),
    Reshape(NodeId),
    Map { input: NodeId, derivative: fn(T) -> T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::Dense { .. } => "dense",
            Op::BiasAdd { .. } => "bias_add",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Prelu { .. } => "prelu",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Mse(..) => "mse",
            Op::SumAll(_) => "sum_all",
            Op::ChannelMul { .. } => "channel_mul",
            Op::RowNormalize { .. } => "row_normalize",
            Op::ComplexMul(..) => "complex_mul",
            Op::Reshape(_) => "reshape",
            Op::Map { .. } => "map",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation tape. Build a loss with the op methods, call
/// [`Graph::backward`] once, then [`Graph::reset`] before reuse.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, NodeId)>,
    check_finite: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `node`, if the loss depends on it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// One gradient per parameter in `store` order. Parameters the loss does
    /// not depend on (or that were never bound) get exact zeros.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                let mut total = Tensor::zeros(store.get(id).shape());
                for &(pid, node) in &self.params {
                    if pid == id {
                        if let Some(g) = self.wrt(node) {
                            total.add_assign(g);
                        }
                    }
                }
                total
            })
            .collect()
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), check_finite: false, consumed: false }
    }

    /// Enable NaN/Inf detection after every op.
    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node so the graph can record a fresh computation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        if self.consumed {
            return Err(TensorError::StaleGraph);
        }
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (see [`Gradients::wrt`]).
    pub fn variable(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter into the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        let node = self.push(store.get(id).clone(), Op::Leaf, true)?;
        self.params.push((id, node));
        Ok(node)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let (x, k) = (&self.node(input)?.value, &self.node(kernel)?.value);
        let geom = ConvGeom::conv(x.shape(), k.shape(), stride, padding)?;
        let out = Tensor::new(geom.out_shape(), conv::forward(&geom, x.data(), k.data()))?;
        let rg = self.grad_flag(&[input, kernel]);
        self.push(out, Op::Conv2d { input, kernel, geom }, rg)
    }

    /// Transposed convolution with kernel `[kh, kw, Cout, Cin]`: the adjoint of
    /// `conv2d` with the same kernel and stride.
    pub fn conv2d_transpose(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (x, k) = (&self.node(input)?.value, &self.node(kernel)?.value);
        let geom = ConvGeom::transpose(x.shape(), k.shape(), stride, padding)?;
        let out = Tensor::new(geom.in_shape(), conv::backward_input(&geom, x.data(), k.data()))?;
        let rg = self.grad_flag(&[input, kernel]);
        self.push(out, Op::ConvTranspose2d { input, kernel, geom }, rg)
    }

    /// `input[B,F] · weight[F,G] + bias[G]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (&self.node(input)?.value, &self.node(weight)?.value, &self.node(bias)?.value);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
            return Err(mismatch("dense", x, w));
        }
        let (batch, fin, fout) = (x.shape()[0], w.shape()[0], w.shape()[1]);
        if b.shape() != [fout] {
            return Err(mismatch("dense", w, b));
        }
        let mut out = vec![T::zero(); batch * fout];
        for (orow, xrow) in out.chunks_mut(fout).zip(x.data().chunks(fin)) {
            orow.copy_from_slice(b.data());
            for (&xv, wrow) in xrow.iter().zip(w.data().chunks(fout)) {
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let rg = self.grad_flag(&[input, weight, bias]);
        self.push(Tensor::new([batch, fout], out)?, Op::Dense { input, weight, bias }, rg)
    }

    /// Add `bias[C]` along the last axis.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (&self.node(input)?.value, &self.node(bias)?.value);
        let c = x.shape().last().copied().unwrap_or(0);
        if b.shape() != [c] || c == 0 {
            return Err(mismatch("bias_add", x, b));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.grad_flag(&[input, bias]);
        self.push(out, Op::BiasAdd { input, bias }, rg)
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.node(input)?.value.map(|v| v.max(T::zero()));
        let rg = self.grad_flag(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.node(input)?.value.map(sigmoid);
        let rg = self.grad_flag(&[input]);
        self.push(out, Op::Sigmoid(input), rg)
    }

    /// Parametric ReLU with one slope per last-axis channel.
    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> Result<NodeId> {
        let (x, a) = (&self.node(input)?.value, &self.node(slope)?.value);
        let c = x.shape().last().copied().unwrap_or(0);
        if a.shape() != [c] || c == 0 {
            return Err(mismatch("prelu", x, a));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &av) in row.iter_mut().zip(a.data()) {
                if *o < T::zero() {
                    *o *= av;
                }
            }
        }
        let rg = self.grad_flag(&[input, slope]);
        self.push(out, Op::Prelu { input, slope }, rg)
    }

    /// Mean over the spatial axes: `[B,H,W,C] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        if x.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "global_avg_pool",
                msg: format!("expected rank 4, got {:?}", x.shape()),
            });
        }
        let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut out = vec![T::zero(); b * c];
        for (orow, item) in out.chunks_mut(c).zip(x.data().chunks(h * w * c)) {
            for px in item.chunks(c) {
                for (o, &v) in orow.iter_mut().zip(px) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.grad_flag(&[input]);
        self.push(Tensor::new([b, c], out)?, Op::GlobalAvgPool(input), rg)
    }

    fn zip_same(&self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        if x.shape() != y.shape() {
            return Err(mismatch(op, x, y));
        }
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("add", a, b, |p, q| p + q)?;
        let rg = self.grad_flag(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("mul", a, b, |p, q| p * q)?;
        let rg = self.grad_flag(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> Result<NodeId> {
        let out = self.node(input)?.value.map(|v| v * factor);
        let rg = self.grad_flag(&[input]);
        self.push(out, Op::Scale(input, factor), rg)
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        if x.rank() == 0 || x.rank() != y.rank() || x.shape()[..x.rank() - 1] != y.shape()[..y.rank() - 1] {
            return Err(mismatch("concat", x, y));
        }
        let (ca, cb) = (x.shape()[x.rank() - 1], y.shape()[y.rank() - 1]);
        let mut data = Vec::with_capacity(x.numel() + y.numel());
        for (ra, rb) in x.data().chunks(ca.max(1)).zip(y.data().chunks(cb.max(1))) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.grad_flag(&[a, b]);
        self.push(Tensor::new(shape, data)?, Op::Concat(a, b), rg)
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let diff = self.zip_same("mse", a, b, |p, q| (p - q) * (p - q))?;
        let n = T::from_f64(diff.numel().max(1) as f64);
        let total: T = diff.data().iter().copied().sum();
        let rg = self.grad_flag(&[a, b]);
        self.push(Tensor::scalar(total / n), Op::Mse(a, b), rg)
    }

    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId> {
        let total: T = self.node(input)?.value.data().iter().copied().sum();
        let rg = self.grad_flag(&[input]);
        self.push(Tensor::scalar(total), Op::SumAll(input), rg)
    }

    /// Multiply `input[B,...,C]` by per-item, per-channel `scales[B,C]`.
    pub fn channel_mul(&mut self, input: NodeId, scales: NodeId) -> Result<NodeId> {
        let (x, s) = (&self.node(input)?.value, &self.node(scales)?.value);
        if x.rank() < 2 || s.rank() != 2 || s.shape()[0] != x.shape()[0] || s.shape()[1] != x.shape()[x.rank() - 1] {
            return Err(mismatch("channel_mul", x, s));
        }
        let (b, c) = (s.shape()[0], s.shape()[1]);
        let item = x.numel() / b;
        let mut out = x.clone();
        for (chunk, srow) in out.data_mut().chunks_mut(item).zip(s.data().chunks(c)) {
            for px in chunk.chunks_mut(c) {
                for (o, &sv) in px.iter_mut().zip(srow) {
                    *o *= sv;
                }
            }
        }
        let rg = self.grad_flag(&[input, scales]);
        self.push(out, Op::ChannelMul { input, scales }, rg)
    }

    /// Rescale every leading-axis item to Euclidean norm `target`:
    /// `y = target · x / max(‖x‖, floor)`.
    pub fn row_normalize(&mut self, input: NodeId, target: T, floor: T) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        if x.rank() == 0 || x.shape()[0] == 0 {
            return Err(TensorError::InvalidShape {
                op: "row_normalize",
                msg: format!("need a leading batch axis, got {:?}", x.shape()),
            });
        }
        let item = x.numel() / x.shape()[0];
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(item.max(1)) {
            // accumulate in f64 so f32 rows still meet the norm to ~1 ulp
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt().max(floor.as_f64());
            let k = T::from_f64(target.as_f64() / norm);
            for v in row.iter_mut() {
                *v *= k;
            }
        }
        let rg = self.grad_flag(&[input]);
        self.push(out, Op::RowNormalize { input, target, floor }, rg)
    }

    /// Complex product of two equally shaped tensors whose consecutive element
    /// pairs hold (real, imaginary) parts.
    pub fn complex_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        if x.shape() != y.shape() {
            return Err(mismatch("complex_mul", x, y));
        }
        if x.numel() % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "complex_mul",
                msg: format!("odd element count in {:?}", x.shape()),
            });
        }
        let mut out = Vec::with_capacity(x.numel());
        for (p, q) in x.data().chunks(2).zip(y.data().chunks(2)) {
            out.push(p[0] * q[0] - p[1] * q[1]);
            out.push(p[0] * q[1] + p[1] * q[0]);
        }
        let out = Tensor::new(x.shape(), out)?;
        let rg = self.grad_flag(&[a, b]);
        self.push(out, Op::ComplexMul(a, b), rg)
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.node(input)?.value.clone().reshape(shape)?;
        let rg = self.grad_flag(&[input]);
        self.push(out, Op::Reshape(input), rg)
    }

    /// Elementwise `f` with a caller-supplied derivative.
    pub fn map(&mut self, input: NodeId, f: fn(T) -> T, derivative: fn(T) -> T) -> Result<NodeId> {
        let out = self.node(input)?.value.map(f);
        let rg = self.grad_flag(&[input]);
        self.push(out, Op::Map { input, derivative }, rg)
    }

    /// Propagate gradients from a scalar `loss` to every node it depends on.
    /// A graph can be differentiated once; call [`Graph::reset`] afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::StaleGraph);
        }
        let loss_shape = self.node(loss)?.value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g)? {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Vector-Jacobian products of one node with respect to its parents.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut out = Vec::with_capacity(3);
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, ref geom } => {
                if self.wants(input) {
                    let dx = conv::backward_input(geom, g.data(), val(kernel).data());
                    out.push((input, Tensor::new(geom.in_shape(), dx)?));
                }
                if self.wants(kernel) {
                    let dk = conv::backward_kernel(geom, val(input).data(), g.data());
                    out.push((kernel, Tensor::new(val(kernel).shape(), dk)?));
                }
            }
            Op::ConvTranspose2d { input, kernel, ref geom } => {
                if self.wants(input) {
                    let dx = conv::forward(geom, g.data(), val(kernel).data());
                    out.push((input, Tensor::new(geom.out_shape(), dx)?));
                }
                if self.wants(kernel) {
                    let dk = conv::backward_kernel(geom, g.data(), val(input).data());
                    out.push((kernel, Tensor::new(val(kernel).shape(), dk)?));
                }
            }
            Op::Dense { input, weight, bias } => {
                let (x, w) = (val(input), val(weight));
                let (fin, fout) = (w.shape()[0], w.shape()[1]);
                if self.wants(input) {
                    let mut dx = Tensor::zeros(x.shape());
                    for (drow, grow) in dx.data_mut().chunks_mut(fin).zip(g.data().chunks(fout)) {
                        for (d, wrow) in drow.iter_mut().zip(w.data().chunks(fout)) {
                            *d = wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    out.push((input, dx));
                }
                if self.wants(weight) {
                    let mut dw = Tensor::zeros(w.shape());
                    for (xrow, grow) in x.data().chunks(fin).zip(g.data().chunks(fout)) {
                        for (&xv, dwrow) in xrow.iter().zip(dw.data_mut().chunks_mut(fout)) {
                            for (d, &gv) in dwrow.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                    out.push((weight, dw));
                }
                if self.wants(bias) {
                    out.push((bias, sum_rows(g, fout)));
                }
            }
            Op::BiasAdd { input, bias } => {
                if self.wants(input) {
                    out.push((input, g.clone()));
                }
                if self.wants(bias) {
                    out.push((bias, sum_rows(g, val(bias).numel())));
                }
            }
            Op::Relu(input) => {
                let data = val(input).data().iter().zip(g.data()).map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() });
                out.push((input, Tensor::new(g.shape(), data.collect())?));
            }
            Op::Sigmoid(input) => {
                let data = node.value.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (T::one() - y));
                out.push((input, Tensor::new(g.shape(), data.collect())?));
            }
            Op::Prelu { input, slope } => {
                let (x, a) = (val(input), val(slope));
                let c = a.numel();
                if self.wants(input) {
                    let mut dx = g.clone();
                    for (drow, xrow) in dx.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
                        for ((d, &xv), &av) in drow.iter_mut().zip(xrow).zip(a.data()) {
                            if xv < T::zero() {
                                *d *= av;
                            }
                        }
                    }
                    out.push((input, dx));
                }
                if self.wants(slope) {
                    let mut da = Tensor::zeros([c]);
                    for (grow, xrow) in g.data().chunks(c).zip(x.data().chunks(c)) {
                        for ((d, &xv), &gv) in da.data_mut().iter_mut().zip(xrow).zip(grow) {
                            if xv < T::zero() {
                                *d += xv * gv;
                            }
                        }
                    }
                    out.push((slope, da));
                }
            }
            Op::GlobalAvgPool(input) => {
                let shape = val(input).shape();
                let (h, w, c) = (shape[1], shape[2], shape[3]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = Tensor::zeros(shape);
                for (item, grow) in dx.data_mut().chunks_mut(h * w * c).zip(g.data().chunks(c)) {
                    for px in item.chunks_mut(c) {
                        for (d, &gv) in px.iter_mut().zip(grow) {
                            *d = gv * inv;
                        }
                    }
                }
                out.push((input, dx));
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(id) {
                        out.push((id, g.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(a, b), (b, a)] {
                    if self.wants(id) {
                        let data = g.data().iter().zip(val(other).data()).map(|(&gv, &o)| gv * o);
                        out.push((id, Tensor::new(g.shape(), data.collect())?));
                    }
                }
            }
            Op::Scale(input, factor) => {
                out.push((input, g.map(|v| v * factor)));
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (val(a).shape()[val(a).rank() - 1], val(b).shape()[val(b).rank() - 1]);
                let mut da = Vec::with_capacity(val(a).numel());
                let mut db = Vec::with_capacity(val(b).numel());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                if self.wants(a) {
                    out.push((a, Tensor::new(val(a).shape(), da)?));
                }
                if self.wants(b) {
                    out.push((b, Tensor::new(val(b).shape(), db)?));
                }
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(a), val(b));
                let k = g.data()[0] * T::from_f64(2.0 / x.numel().max(1) as f64);
                let d: Vec<T> = x.data().iter().zip(y.data()).map(|(&p, &q)| (p - q) * k).collect();
                if self.wants(b) {
                    out.push((b, Tensor::new(x.shape(), d.iter().map(|&v| -v).collect())?));
                }
                if self.wants(a) {
                    out.push((a, Tensor::new(x.shape(), d)?));
                }
            }
            Op::SumAll(input) => {
                out.push((input, Tensor::full(val(input).shape(), g.data()[0])));
            }
            Op::ChannelMul { input, scales } => {
                let (x, s) = (val(input), val(scales));
                let (b, c) = (s.shape()[0], s.shape()[1]);
                let item = x.numel() / b;
                if self.wants(input) {
                    let mut dx = g.clone();
                    for (chunk, srow) in dx.data_mut().chunks_mut(item).zip(s.data().chunks(c)) {
                        for px in chunk.chunks_mut(c) {
                            for (d, &sv) in px.iter_mut().zip(srow) {
                                *d *= sv;
                            }
                        }
                    }
                    out.push((input, dx));
                }
                if self.wants(scales) {
                    let mut ds = Tensor::zeros(s.shape());
                    for ((drow, xc), gc) in ds.data_mut().chunks_mut(c).zip(x.data().chunks(item)).zip(g.data().chunks(item)) {
                        for (xp, gp) in xc.chunks(c).zip(gc.chunks(c)) {
                            for ((d, &xv), &gv) in drow.iter_mut().zip(xp).zip(gp) {
                                *d += xv * gv;
                            }
                        }
                    }
                    out.push((scales, ds));
                }
            }
            Op::RowNormalize { input, target, floor } => {
                let x = val(input);
                let item = (x.numel() / x.shape()[0]).max(1);
                let mut dx = Tensor::zeros(x.shape());
                for ((drow, xrow), grow) in dx.data_mut().chunks_mut(item).zip(x.data().chunks(item)).zip(g.data().chunks(item)) {
                    let norm = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > floor {
                        let proj: T = xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>() / (norm * norm);
                        let k = target / norm;
                        for ((d, &xv), &gv) in drow.iter_mut().zip(xrow).zip(grow) {
                            *d = k * (gv - xv * proj);
                        }
                    } else {
                        let k = target / floor;
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = k * gv;
                        }
                    }
                }
                out.push((input, dx));
            }
            Op::ComplexMul(a, b) => {
                for (id, other) in [(a, b), (b, a)] {
                    if self.wants(id) {
                        let mut d = Vec::with_capacity(g.numel());
                        for (gp, q) in g.data().chunks(2).zip(val(other).data().chunks(2)) {
                            // multiply by the conjugate of the other factor
                            d.push(gp[0] * q[0] + gp[1] * q[1]);
                            d.push(gp[1] * q[0] - gp[0] * q[1]);
                        }
                        out.push((id, Tensor::new(g.shape(), d)?));
                    }
                }
            }
            Op::Reshape(input) => {
                out.push((input, g.clone().reshape(val(input).shape())?));
            }
            Op::Map { input, derivative } => {
                let data = val(input).data().iter().zip(g.data()).map(|(&x, &gv)| gv * derivative(x));
                out.push((input, Tensor::new(g.shape(), data.collect())?));
            }
        }
        Ok(out)
    }
}

/// Sum a tensor's rows of width `width` into one row.
fn sum_rows<T: Scalar>(g: &Tensor<T>, width: usize) -> Tensor<T> {
    let mut acc = Tensor::zeros([width]);
    for row in g.data().chunks(width) {
        for (a, &v) in acc.data_mut().iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut g = Graph::new();
        let x = Tensor::from_fn([1, 3, 3, 2], |i| i as f64 * 0.1);
        let mut k = Tensor::zeros([1, 1, 2, 2]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let xi = g.constant(x.clone()).unwrap();
        let ki = g.constant(k.clone()).unwrap();
        let y = g.conv2d(xi, ki, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y), &x);
        let yt = g.conv2d_transpose(xi, ki, 1, Padding::Same).unwrap();
        assert_eq!(g.value(yt), &x);
    }

    #[test]
    fn ones_valid_conv_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 3, 3, 1], 1.0)).unwrap();
        let k = g.constant(Tensor::full([3, 3, 1, 1], 1.0)).unwrap();
        let y = g.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn dense_identity_and_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let zero_b = g.constant(Tensor::zeros([2])).unwrap();
        let y = g.dense(x, eye, zero_b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let zw = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(t(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let y = g.dense(x, zw, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn activations_reference_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[-1.0, 0.0, 2.0])).unwrap();
        let a = g.constant(Tensor::full([3], 0.25)).unwrap();
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[-0.25, 0.0, 2.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[1], 0.5);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn global_avg_pool_reference_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let c = g.constant(Tensor::full([2, 3, 3, 2], 0.7)).unwrap();
        let p = g.global_avg_pool(c).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn mse_reference_points() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([4], |i| i as f64)).unwrap();
        let m = g.mse(x, x).unwrap();
        assert_eq!(g.value(m).data(), &[0.0]);
        let z = g.constant(Tensor::zeros([5])).unwrap();
        let o = g.constant(Tensor::full([5], 1.0)).unwrap();
        let m = g.mse(z, o).unwrap();
        assert_eq!(g.value(m).data(), &[1.0]);
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut g = Graph::new();
        let xv = t(&[4], &[0.5, -1.0, 2.0, 3.0]);
        let x = g.variable(xv.clone()).unwrap();
        let c = g.constant(Tensor::full([4], 1.0)).unwrap();
        let loss = g.mse(x, c).unwrap();
        let grads = g.backward(loss).unwrap();
        let expected: Vec<f64> = xv.data().iter().map(|v| 2.0 * (v - 1.0) / 4.0).collect();
        assert_eq!(grads.wrt(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn second_backward_is_rejected_until_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full([2], 1.0)).unwrap();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::StaleGraph)));
        assert!(matches!(g.relu(x), Err(TensorError::StaleGraph)));
        g.reset();
        let x = g.variable(Tensor::full([2], 1.0)).unwrap();
        let s = g.sum_all(x).unwrap();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full([2], 1.0)).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn unused_parameter_gets_exact_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::full([3], 2.0)).unwrap();
        let unused = store.add("unused", Tensor::full([2, 2], 5.0)).unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, used).unwrap();
        let _ = g.param(&store, unused).unwrap();
        let s = g.sum_all(u).unwrap();
        let grads = g.backward(s).unwrap().for_params(&store);
        assert_eq!(grads[0].data(), &[1.0, 1.0, 1.0]);
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_shapes_are_errors_not_broadcasts() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([3])).unwrap();
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(g.mul(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(g.mse(a, b), Err(TensorError::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros([3, 3])).unwrap();
        assert!(matches!(g.concat(a, c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn finite_checks_catch_overflow() {
        let mut g = Graph::<f32>::new().with_finite_checks(true);
        let x = g.constant(Tensor::full([2], 1e30)).unwrap();
        let y = g.mul(x, x);
        assert!(matches!(y, Err(TensorError::NonFinite { op: "mul" })));
    }

    #[test]
    fn complex_mul_by_unit_imaginary_rotates() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[4], &[1.0, 2.0, -3.0, 0.5])).unwrap();
        let j = g.constant(t(&[4], &[0.0, 1.0, 0.0, 1.0])).unwrap();
        let y = g.complex_mul(z, j).unwrap();
        assert_eq!(g.value(y).data(), &[-2.0, 1.0, -0.5, -3.0]);
    }

    #[test]
    fn row_normalize_hits_target_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[2.0, 0.0, 3.0, 4.0])).unwrap();
        let y = g.row_normalize(x, 2f64.sqrt(), 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 2f64.sqrt()).abs() < 1e-15 && v[1] == 0.0);
        assert!((v[2] * v[2] + v[3] * v[3] - 2.0).abs() < 1e-14);
        let z = g.constant(Tensor::zeros([1, 4])).unwrap();
        let y = g.row_normalize(z, 1.0, 1e-12).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }
}
