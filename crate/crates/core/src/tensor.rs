//! Dense `f64` tensors and a small reverse-mode graph.
//!
//! The graph records nodes in creation order. Every node stores its output
//! tensor, and `backward` walks the nodes in exact reverse order, so no
//! topological sort is needed. The operation set is closed: it covers the
//! masked convolution stack, the FC layers, the cross-entropy and L1 terms,
//! and the class-mean alignment penalty.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || len != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len]).expect("non-empty shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..len).map(&mut f).collect()).expect("non-empty shape")
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf { trainable: bool },
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, padding: usize },
    Hadamard(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    AddBias { input: NodeId, bias: NodeId },
    Relu(NodeId),
    Reshape(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    L1Norm(NodeId),
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Hadamard(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::AddBias { input, bias } => vec![*input, *bias],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L1Norm(x) => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

/// Operation records in creation order.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass; zeros for nodes the loss does not reach.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: true }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: false }, value)
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            out,
        ))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("hadamard", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(Op::Hadamard(a, b), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * factor).collect(),
            grad: None,
        };
        self.push(Op::Scale(x, factor), out)
    }

    /// `(m × k) · (k × n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Adds `bias[c]` to every element whose axis-1 index is `c`.
    ///
    /// Covers both `N × D` FC activations and `N × C × H × W` feature maps.
    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(input), self.value(bias));
        if tx.shape.len() < 2 || tb.shape.len() != 1 || tb.shape[0] != tx.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let channels = tx.shape[1];
        let inner: usize = tx.shape[2..].iter().product();
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data[(i / inner) % channels])
            .collect();
        let out = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(Op::AddBias { input, bias }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.max(0.0)).collect(),
            grad: None,
        };
        self.push(Op::Relu(x), out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape.clone();
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[shape[0], rest])
    }

    /// Cross-entropy of `softmax(logits)` against class indices, summed over rows.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        if t.shape.len() != 2 || t.shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let classes = t.shape[1];
        let mut total = 0.0;
        for (row, &target) in t.data.chunks(classes).zip(targets) {
            if target >= classes {
                return Err(TensorError::ClassOutOfRange {
                    index: target,
                    classes,
                });
            }
            total += log_sum_exp(row) - row[target];
        }
        let out = Tensor::scalar(total);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            out,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    pub fn l1_norm(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().map(|v| v.abs()).sum();
        self.push(Op::L1Norm(x), Tensor::scalar(s))
    }

    /// Clears every gradient buffer to zero.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Populates `grad` on every node with d`loss`/d`node`.
    ///
    /// Existing gradients are cleared first, so repeated calls give identical results.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape.clone()));
        }
        self.zero_grad();
        self.nodes[loss.0].value.grad_mut()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            let upstream = node.value.grad.as_deref().expect("grads initialised");
            if upstream.iter().all(|g| *g == 0.0) {
                continue;
            }
            backprop_node(before, node, upstream);
        }
        Ok(())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn grad_of(nodes: &mut [Node], id: NodeId) -> &mut [f64] {
    nodes[id.0].value.grad_mut()
}

fn backprop_node(before: &mut [Node], node: &Node, up: &[f64]) {
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let x = before[input.0].value.clone();
            let k = before[kernel.0].value.clone();
            let (gx, gk) = conv2d_backward(&x, &k, *stride, *padding, up);
            add_into(grad_of(before, *input), &gx);
            add_into(grad_of(before, *kernel), &gk);
        }
        Op::Hadamard(a, b) => {
            let va = before[a.0].value.data.clone();
            let vb = before[b.0].value.data.clone();
            for (g, (u, y)) in grad_of(before, *a).iter_mut().zip(up.iter().zip(&vb)) {
                *g += u * y;
            }
            for (g, (u, x)) in grad_of(before, *b).iter_mut().zip(up.iter().zip(&va)) {
                *g += u * x;
            }
        }
        Op::Add(a, b) => {
            add_into(grad_of(before, *a), up);
            add_into(grad_of(before, *b), up);
        }
        Op::Sub(a, b) => {
            add_into(grad_of(before, *a), up);
            for (g, u) in grad_of(before, *b).iter_mut().zip(up) {
                *g -= u;
            }
        }
        Op::Scale(x, factor) => {
            for (g, u) in grad_of(before, *x).iter_mut().zip(up) {
                *g += u * factor;
            }
        }
        Op::MatMul(a, b) => {
            let ta = before[a.0].value.clone();
            let tb = before[b.0].value.clone();
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            // dA = up · Bᵀ
            let ga = grad_of(before, *a);
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += up[i * n + j] * tb.data[p * n + j];
                    }
                    ga[i * k + p] += s;
                }
            }
            // dB = Aᵀ · up
            let gb = grad_of(before, *b);
            for i in 0..m {
                for p in 0..k {
                    let av = ta.data[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += av * up[i * n + j];
                    }
                }
            }
        }
        Op::AddBias { input, bias } => {
            add_into(grad_of(before, *input), up);
            let shape = node.value.shape.clone();
            let channels = shape[1];
            let inner: usize = shape[2..].iter().product();
            let gb = grad_of(before, *bias);
            for (i, u) in up.iter().enumerate() {
                gb[(i / inner) % channels] += u;
            }
        }
        Op::Relu(x) => {
            let out = &node.value.data;
            for (g, (u, o)) in grad_of(before, *x).iter_mut().zip(up.iter().zip(out)) {
                if *o > 0.0 {
                    *g += u;
                }
            }
        }
        Op::Reshape(x) => add_into(grad_of(before, *x), up),
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let t = before[logits.0].value.clone();
            let classes = t.shape[1];
            let g = grad_of(before, *logits);
            for (r, (row, &target)) in t.data.chunks(classes).zip(targets).enumerate() {
                let lse = log_sum_exp(row);
                for (c, v) in row.iter().enumerate() {
                    let p = (v - lse).exp();
                    let y = if c == target { 1.0 } else { 0.0 };
                    g[r * classes + c] += up[0] * (p - y);
                }
            }
        }
        Op::Sum(x) => {
            for g in grad_of(before, *x).iter_mut() {
                *g += up[0];
            }
        }
        Op::Mean(x) => {
            let g = grad_of(before, *x);
            let scale = up[0] / g.len() as f64;
            for v in g.iter_mut() {
                *v += scale;
            }
        }
        Op::L1Norm(x) => {
            let vals = before[x.0].value.data.clone();
            for (g, v) in grad_of(before, *x).iter_mut().zip(&vals) {
                // subgradient at zero is zero
                if *v > 0.0 {
                    *g += up[0];
                } else if *v < 0.0 {
                    *g -= up[0];
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

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: input.shape.clone(),
        rhs: kernel.shape.clone(),
    };
    if input.shape.len() != 4 || kernel.shape.len() != 4 || input.shape[1] != kernel.shape[1] {
        return Err(mismatch());
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: "stride must be positive".into(),
        });
    }
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (o, kh, kw) = (kernel.shape[0], kernel.shape[2], kernel.shape[3]);
    let oh = conv_out_dim(h, kh, stride, padding).ok_or_else(mismatch)?;
    let ow = conv_out_dim(w, kw, stride, padding).ok_or_else(mismatch)?;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Visits every (output element, input element, kernel element) triple that
/// contributes to the convolution, skipping padded positions.
#[inline]
fn for_each_tap(
    d: &ConvDims,
    stride: usize,
    padding: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    for b in 0..d.n {
        for oc in 0..d.o {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let out_idx = ((b * d.o + oc) * d.oh + oy) * d.ow + ox;
                    for ic in 0..d.c {
                        for ky in 0..d.kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let in_idx =
                                    ((b * d.c + ic) * d.h + iy as usize) * d.w + ix as usize;
                                let k_idx = ((oc * d.c + ic) * d.kh + ky) * d.kw + kx;
                                f(out_idx, in_idx, k_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let d = conv_dims(input, kernel, stride, padding)?;
    let mut out = vec![0.0; d.n * d.o * d.oh * d.ow];
    for_each_tap(&d, stride, padding, |o, i, k| {
        out[o] += input.data[i] * kernel.data[k];
    });
    Tensor::new(vec![d.n, d.o, d.oh, d.ow], out)
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    up: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = conv_dims(input, kernel, stride, padding).expect("validated in forward");
    let mut gx = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for_each_tap(&d, stride, padding, |o, i, k| {
        let u = up[o];
        gx[i] += u * kernel.data[k];
        gk[k] += u * input.data[i];
    });
    (gx, gk)
}
