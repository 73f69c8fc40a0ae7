use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, axis_split, for_each_lane, ConvGeom};
use super::{Result, Tensor, TensorError};

pub type NodeId = usize;

const LOG_FLOOR: f64 = 1e-300;
const NORM_EPS: f64 = 1e-12;

/// Every differentiable operation the tape knows about.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Relu,
    Gelu,
    Mean(Option<usize>),
    Sum(Option<usize>),
    Log,
    Exp,
    Softmax(usize),
    LogSoftmax(usize),
    NormalizeL2(usize),
    Scale(f64),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    AddBias(usize),
    Reshape(Vec<usize>),
    Transpose,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AddBias {
        input: NodeId,
        bias: NodeId,
        axis: usize,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    NormalizeL2 {
        input: NodeId,
        axis: usize,
        norms: Vec<f64>,
    },
    Scale(NodeId, f64),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
    Transpose(NodeId),
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order: an op
/// can only reference nodes that already exist.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    forward_ops: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of the root with respect to every grad-requiring leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Number of non-leaf nodes recorded so far.
    pub fn op_count(&self) -> usize {
        self.forward_ops.get()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        if !matches!(op, Op::Leaf) {
            self.forward_ops.set(self.forward_ops.get() + 1);
        }
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Generic op dispatch.
    pub fn apply<'t>(&'t self, kind: &OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => 2,
            OpKind::Conv2d { .. } | OpKind::AddBias(_) => 2,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(invalid("apply", format!("{kind:?} takes {arity} inputs, got {}", inputs.len())));
        }
        let a = inputs[0];
        match kind {
            OpKind::Add => a.add(inputs[1]),
            OpKind::Sub => a.sub(inputs[1]),
            OpKind::Mul => a.mul(inputs[1]),
            OpKind::MatMul => a.matmul(inputs[1]),
            OpKind::Conv2d { stride, pad } => a.conv2d(inputs[1], *stride, *pad),
            OpKind::Relu => Ok(a.relu()),
            OpKind::Gelu => Ok(a.gelu()),
            OpKind::Mean(axis) => a.mean(*axis),
            OpKind::Sum(axis) => a.sum(*axis),
            OpKind::Log => a.log(),
            OpKind::Exp => Ok(a.exp()),
            OpKind::Softmax(axis) => a.softmax(*axis),
            OpKind::LogSoftmax(axis) => a.log_softmax(*axis),
            OpKind::NormalizeL2(axis) => a.normalize_l2(*axis),
            OpKind::Scale(s) => Ok(a.scale(*s)),
            OpKind::Concat(axis) => Var::concat(inputs, *axis),
            OpKind::Slice { axis, start, len } => a.slice(*axis, *start, *len),
            OpKind::AddBias(axis) => a.add_bias(inputs[1], *axis),
            OpKind::Reshape(shape) => a.reshape(shape),
            OpKind::Transpose => a.transpose(),
        }
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.shape().is_empty() {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: NodeId, g: Vec<f64>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(g) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.iter().map(|v| -v).collect());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, g.iter().zip(vb.data()).map(|(g, b)| g * b).collect());
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, g.iter().zip(va.data()).map(|(g, a)| g * a).collect());
                    }
                }
                Op::MatMul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, n, k, &g, (n, 1), vb.data(), (1, n), 0.0, &mut ga);
                        acc(&mut grads, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, m, n, va.data(), (1, k), &g, (n, 1), 0.0, &mut gb);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                    cols,
                } => {
                    let o = nodes[*kernel].value.shape()[0];
                    let sp = geom.spatial();
                    let ncols = geom.cols();
                    let p = geom.patch();
                    // [N, O, S] -> [O, N·S]
                    let mut gt = vec![0.0; o * ncols];
                    for n in 0..geom.n {
                        for oc in 0..o {
                            let src = &g[(n * o + oc) * sp..(n * o + oc + 1) * sp];
                            gt[oc * ncols + n * sp..oc * ncols + (n + 1) * sp].copy_from_slice(src);
                        }
                    }
                    if nodes[*kernel].requires_grad {
                        let mut gk = vec![0.0; o * p];
                        kernels::gemm(o, ncols, p, &gt, (ncols, 1), cols, (1, ncols), 0.0, &mut gk);
                        acc(&mut grads, *kernel, gk);
                    }
                    if nodes[*input].requires_grad {
                        let kv = &nodes[*kernel].value;
                        let mut gcols = vec![0.0; p * ncols];
                        kernels::gemm(p, o, ncols, kv.data(), (1, p), &gt, (ncols, 1), 0.0, &mut gcols);
                        acc(&mut grads, *input, kernels::col2im(&gcols, geom));
                    }
                }
                Op::AddBias { input, bias, axis } => {
                    if nodes[*bias].requires_grad {
                        let split = axis_split(y.shape(), *axis);
                        let mut gb = vec![0.0; split.1];
                        let (outer, len, inner) = split;
                        for o in 0..outer {
                            for c in 0..len {
                                let base = (o * len + c) * inner;
                                gb[c] += g[base..base + inner].iter().sum::<f64>();
                            }
                        }
                        acc(&mut grads, *bias, gb);
                    }
                    acc(&mut grads, *input, g);
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    let gx = g
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, gx);
                }
                Op::Gelu(a) => {
                    let x = &nodes[*a].value;
                    let gx = g
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect();
                    acc(&mut grads, *a, gx);
                }
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    let gx = g
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, gx);
                }
                Op::Exp(a) => {
                    acc(&mut grads, *a, g.iter().zip(y.data()).map(|(g, y)| g * y).collect());
                }
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let x = &nodes[*a].value;
                    let is_mean = matches!(node.op, Op::Mean(..));
                    let gx = match axis {
                        None => {
                            let s = if is_mean { g[0] / x.len() as f64 } else { g[0] };
                            vec![s; x.len()]
                        }
                        Some(axis) => {
                            let (outer, len, inner) = axis_split(x.shape(), *axis);
                            let div = if is_mean { len as f64 } else { 1.0 };
                            let mut gx = vec![0.0; x.len()];
                            for o in 0..outer {
                                for k in 0..len {
                                    for i in 0..inner {
                                        gx[(o * len + k) * inner + i] = g[o * inner + i] / div;
                                    }
                                }
                            }
                            gx
                        }
                    };
                    acc(&mut grads, *a, gx);
                }
                Op::Softmax(a, axis) => {
                    let mut gx = vec![0.0; g.len()];
                    let yd = y.data();
                    for_each_lane(axis_split(y.shape(), *axis), |lane| {
                        let idx: Vec<usize> = lane.collect();
                        let dot: f64 = idx.iter().map(|&j| g[j] * yd[j]).sum();
                        for &j in &idx {
                            gx[j] = yd[j] * (g[j] - dot);
                        }
                    });
                    acc(&mut grads, *a, gx);
                }
                Op::LogSoftmax(a, axis) => {
                    let mut gx = vec![0.0; g.len()];
                    let yd = y.data();
                    for_each_lane(axis_split(y.shape(), *axis), |lane| {
                        let idx: Vec<usize> = lane.collect();
                        let total: f64 = idx.iter().map(|&j| g[j]).sum();
                        for &j in &idx {
                            gx[j] = g[j] - yd[j].exp() * total;
                        }
                    });
                    acc(&mut grads, *a, gx);
                }
                Op::NormalizeL2 { input, axis, norms } => {
                    let mut gx = vec![0.0; g.len()];
                    let yd = y.data();
                    let mut lane_no = 0;
                    for_each_lane(axis_split(y.shape(), *axis), |lane| {
                        let idx: Vec<usize> = lane.collect();
                        let norm = norms[lane_no];
                        lane_no += 1;
                        if norm > NORM_EPS {
                            let dot: f64 = idx.iter().map(|&j| g[j] * yd[j]).sum();
                            for &j in &idx {
                                gx[j] = (g[j] - yd[j] * dot) / norm;
                            }
                        } else {
                            for &j in &idx {
                                gx[j] = g[j] / NORM_EPS;
                            }
                        }
                    });
                    acc(&mut grads, *input, gx);
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, g.iter().map(|v| v * s).collect());
                }
                Op::Concat(inputs, axis) => {
                    let (outer, _, inner) = axis_split(y.shape(), *axis);
                    let total = y.shape()[*axis];
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = nodes[inp].value.shape()[*axis];
                        if nodes[inp].requires_grad {
                            let mut gi = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                gi.extend_from_slice(&g[start..start + len * inner]);
                            }
                            acc(&mut grads, inp, gi);
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let x = &nodes[*input].value;
                    let (outer, total, inner) = axis_split(x.shape(), *axis);
                    let len = y.shape()[*axis];
                    let mut gx = vec![0.0; x.len()];
                    for o in 0..outer {
                        let dst = (o * total + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::Reshape(a) => acc(&mut grads, *a, g),
                Op::Transpose(a) => {
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    let mut gx = vec![0.0; g.len()];
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] = g[i * c + j];
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
            }
        }

        let mut out = Gradients::default();
        for (id, node) in nodes.iter().enumerate().take(root.id + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape");
                out.grads.insert(id, t);
            }
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, rg, op)
    }

    fn binary_same(&self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>, bool)> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch(op, a.shape(), b.shape()));
        }
        Ok((a, b, self.requires_grad() || other.requires_grad()))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b, rg) = self.binary_same(other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(t, rg, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b, rg) = self.binary_same(other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(t, rg, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b, rg) = self.binary_same(other, "mul_elementwise")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(t, rg, Op::Mul(self.id, other.id)))
    }

    /// `[m, k] × [k, n] -> [m, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut c);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(vec![m, n], c)?, rg, Op::MatMul(self.id, other.id)))
    }

    /// NCHW input convolved with an OIHW kernel, zero padding, im2col + gemm.
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let x = self.value();
        let k = kernel.value();
        if x.ndim() != 4 || k.ndim() != 4 || x.shape()[1] != k.shape()[1] {
            return Err(mismatch("conv2d", x.shape(), k.shape()));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch("conv2d", x.shape(), k.shape()));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = kernels::im2col(x.data(), &geom);
        let ncols = geom.cols();
        let sp = geom.spatial();
        let mut tmp = vec![0.0; o * ncols];
        kernels::gemm(o, geom.patch(), ncols, k.data(), (geom.patch(), 1), &cols, (ncols, 1), 0.0, &mut tmp);
        let mut out = vec![0.0; n * o * sp];
        for b in 0..n {
            for oc in 0..o {
                out[(b * o + oc) * sp..(b * o + oc + 1) * sp]
                    .copy_from_slice(&tmp[oc * ncols + b * sp..oc * ncols + (b + 1) * sp]);
            }
        }
        let rg = self.requires_grad() || kernel.requires_grad();
        let t = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        // the im2col buffer is only needed for the kernel gradient
        let cols = if kernel.requires_grad() { cols } else { Vec::new() };
        Ok(self.tape.push(
            t,
            rg,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
                cols,
            },
        ))
    }

    /// Add a 1-D `bias` broadcast along `axis`.
    pub fn add_bias(&self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        check_axis("add_bias", x.shape(), axis)?;
        if b.ndim() != 1 || b.shape()[0] != x.shape()[axis] {
            return Err(mismatch("add_bias", x.shape(), b.shape()));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for c in 0..len {
                let base = (o * len + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b.data()[c];
                }
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            rg,
            Op::AddBias {
                input: self.id,
                bias: bias.id,
                axis,
            },
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let t = self.value().map(|v| if v < 0.0 { 0.0 } else { v });
        self.unary(t, Op::Relu(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        let t = self.value().map(kernels::gelu);
        self.unary(t, Op::Gelu(self.id))
    }

    /// Natural log with inputs floored at a tiny positive value.
    pub fn log(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(TensorError::Empty { op: "log" });
        }
        let t = x.map(|v| v.max(LOG_FLOOR).ln());
        Ok(self.unary(t, Op::Log(self.id)))
    }

    pub fn exp(&self) -> Var<'t> {
        let t = self.value().map(f64::exp);
        self.unary(t, Op::Exp(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let t = self.value().map(|v| v * s);
        self.unary(t, Op::Scale(self.id, s))
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let name = if mean { "mean" } else { "sum" };
        let x = self.value();
        if x.is_empty() {
            return Err(TensorError::Empty { op: name });
        }
        let t = match axis {
            None => {
                let s: f64 = x.data().iter().sum();
                Tensor::scalar(if mean { s / x.len() as f64 } else { s })
            }
            Some(axis) => {
                check_axis(name, x.shape(), axis)?;
                let (outer, len, inner) = axis_split(x.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += x.data()[(o * len + k) * inner + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                Tensor::new(reduced_shape(x.shape(), axis), out)?
            }
        };
        let op = if mean { Op::Mean(self.id, axis) } else { Op::Sum(self.id, axis) };
        Ok(self.unary(t, op))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(TensorError::Empty { op: "softmax" });
        }
        check_axis("softmax", x.shape(), axis)?;
        let out = kernels::softmax_lanes(x.data(), axis_split(x.shape(), axis), false);
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::Softmax(self.id, axis)))
    }

    /// Stable `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(TensorError::Empty { op: "log_softmax" });
        }
        check_axis("log_softmax", x.shape(), axis)?;
        let out = kernels::softmax_lanes(x.data(), axis_split(x.shape(), axis), true);
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::LogSoftmax(self.id, axis)))
    }

    /// Divide every lane along `axis` by its L2 norm.
    pub fn normalize_l2(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("normalize_l2", x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::new();
        for_each_lane(axis_split(x.shape(), axis), |lane| {
            let idx: Vec<usize> = lane.collect();
            let norm = idx.iter().map(|&j| xd[j] * xd[j]).sum::<f64>().sqrt();
            let d = norm.max(NORM_EPS);
            for &j in &idx {
                out[j] = xd[j] / d;
            }
            norms.push(norm);
        });
        Ok(self.unary(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::NormalizeL2 {
                input: self.id,
                axis,
                norms,
            },
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(Var::requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Tensor::new(shape, data)?, rg, Op::Concat(ids, axis)))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("slice", x.shape(), axis)?;
        if start + len > x.shape()[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let (outer, total, inner) = axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::new(shape, data)?,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(invalid("transpose", format!("expected 2-D, got {:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![0.0; x.len()];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        Ok(self.unary(Tensor::new(vec![c, r], data)?, Op::Transpose(self.id)))
    }
}
