use std::fmt;

use super::conv::{self, ConvGeom};
use super::real::{gemm, Real};
use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator tags, used for diagnostics and gradient-check reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    MaxPool2d,
    Linear,
    Add,
    Sub,
    Mul,
    Sum,
    Reshape,
    SoftmaxCrossEntropy,
    MseLoss,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::MseLoss => "mse_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            OpKind::Leaf,
            OpKind::Conv2d,
            OpKind::Relu,
            OpKind::MaxPool2d,
            OpKind::Linear,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Sum,
            OpKind::Reshape,
            OpKind::SoftmaxCrossEntropy,
            OpKind::MseLoss,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu { x: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    MseLoss { pred: Var, target: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Sum { .. } => OpKind::Sum,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::MseLoss { .. } => OpKind::MseLoss,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so the recording order is already a
/// topological order. [`Graph::backward`] walks it in reverse, visiting each
/// node once. Leaf gradients accumulate across backward calls until
/// [`Graph::zero_grad`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    check_finite: bool,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
            fault: None,
        }
    }

    /// Debug mode: every op verifies its output is finite.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Harness self-test hook: perturbs the gradients emitted by one operator
    /// kind so that gradient checks can be shown to catch it.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(op.kind().name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    /// Stride-1 cross-correlation with `pad` zeros on every border.
    ///
    /// Shapes: input `[N,C,H,W]`, weight `[K,C,fh,fw]`, bias `[K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 4 {
            return Err(invalid!("conv2d: input must be rank 4 [N,C,H,W], got {xs:?}"));
        }
        if ws.len() != 4 {
            return Err(invalid!("conv2d: weight must be rank 4 [K,C,fh,fw], got {ws:?}"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, wc, fh, fw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(invalid!(
                "conv2d: weight expects C={wc} input channels but input has C={c}"
            ));
        }
        if fh % 2 == 0 || fw % 2 == 0 {
            return Err(invalid!("conv2d: filter extents must be odd, got fh={fh}, fw={fw}"));
        }
        if bs != [k] {
            return Err(invalid!("conv2d: bias must have shape [K={k}], got {bs:?}"));
        }
        let (oh, ow) = conv::conv_output_dims(h, wd, fh, fw, pad).ok_or_else(|| {
            invalid!("conv2d: filter {fh}x{fw} exceeds padded input H={h}, W={wd}, pad={pad}")
        })?;
        let geom = ConvGeom { n, c, h, w: wd, k, fh, fw, pad, oh, ow };
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, k, oh, ow], out)?;
        self.record(value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.record(value, Op::Relu { x }, &[x])
    }

    /// Window maximum over `[N,C,H,W]`. Output extent `⌊(H−k)/stride⌋+1`.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(invalid!("maxpool2d: k and stride must be positive (k={k}, stride={stride})"));
        }
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(invalid!("maxpool2d: input must be rank 4, got {xs:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < k || w < k {
            return Err(invalid!("maxpool2d: window {k} exceeds input H={h}, W={w}"));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            // strict comparison keeps the first maximum in scan order
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.record(value, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Affine map `x·Wᵀ + b`. Shapes: x `[N,D]`, weight `[M,D]`, bias `[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(invalid!("linear: expected rank-2 input and weight, got {xs:?} and {ws:?}"));
        }
        let (n, d) = (xs[0], xs[1]);
        let (m, wd) = (ws[0], ws[1]);
        if wd != d {
            return Err(invalid!("linear: input has D={d} features but weight expects D={wd}"));
        }
        if self.shape(b) != [m] {
            return Err(invalid!("linear: bias must have shape [M={m}], got {:?}", self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(n, d, m, self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let value = Tensor::new(vec![n, m], out)?;
        self.record(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |p, q| p + q)?;
        self.record(value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |p, q| p - q)?;
        self.record(value, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |p, q| p * q)?;
        self.record(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.record(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.record(value, Op::Reshape { x }, &[x])
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(invalid!("softmax_cross_entropy: logits must be [N,l], got {s:?}"));
        }
        let (n, l) = (s[0], s[1]);
        if l < 2 {
            return Err(invalid!("softmax_cross_entropy: need at least 2 classes, got {l}"));
        }
        if labels.len() != n {
            return Err(invalid!(
                "softmax_cross_entropy: {} labels for a batch of {n}",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
            return Err(invalid!("softmax_cross_entropy: label {bad} out of range [0,{l})"));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * l);
        let mut total = 0.0f64;
        for (row, &y) in z.chunks(l).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom: T = exps.iter().copied().sum();
            total += (denom.ln() - (row[y] - max)).as_f64();
            probs.extend(exps.iter().map(|&e| e / denom));
        }
        let loss = Tensor::scalar(T::of(total / n as f64));
        self.record(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `0.5 · mean((pred − target)²)`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let sq: f64 = p.iter().zip(t).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
        let loss = Tensor::scalar(T::of(0.5 * sq / p.len() as f64));
        self.record(loss, Op::MseLoss { pred, target }, &[pred, target])
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(invalid!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        let Graph {
            nodes,
            grads,
            fault,
            ..
        } = self;
        let nodes: &[Node<T>] = nodes;
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink {
                nodes,
                adj: &mut adj,
                scale: if *fault == Some(node.op.kind()) {
                    Some(T::of(1.1))
                } else {
                    None
                },
            };
            match &node.op {
                Op::Leaf => {
                    match &mut grads[i] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let cg = conv::backward(
                        geom,
                        nodes[x.0].value.data(),
                        nodes[w.0].value.data(),
                        &g,
                        sink.wants(*x),
                        sink.wants(*w),
                        sink.wants(*b),
                    );
                    sink.put_opt(*x, cg.dx);
                    sink.put_opt(*w, cg.dw);
                    sink.put_opt(*b, cg.db);
                }
                Op::Relu { x } => {
                    let out = node.value.data();
                    let dx = g
                        .iter()
                        .zip(out)
                        .map(|(&gi, &o)| if o > T::zero() { gi } else { T::zero() })
                        .collect();
                    sink.put(*x, dx);
                }
                Op::MaxPool2d { x, argmax } => {
                    if sink.wants(*x) {
                        let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                        for (&src, &gi) in argmax.iter().zip(&g) {
                            dx[src] += gi;
                        }
                        sink.put(*x, dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, d) = (xs[0], xs[1]);
                    let m = nodes[w.0].value.shape()[0];
                    if sink.wants(*x) {
                        let mut dx = vec![T::zero(); n * d];
                        gemm(n, m, d, &g, false, nodes[w.0].value.data(), false, T::zero(), &mut dx);
                        sink.put(*x, dx);
                    }
                    if sink.wants(*w) {
                        let mut dw = vec![T::zero(); m * d];
                        gemm(m, n, d, &g, true, nodes[x.0].value.data(), false, T::zero(), &mut dw);
                        sink.put(*w, dw);
                    }
                    if sink.wants(*b) {
                        let mut db = vec![T::zero(); m];
                        for row in g.chunks(m) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        sink.put(*b, db);
                    }
                }
                Op::Add { a, b } => {
                    if sink.wants(*a) {
                        sink.put(*a, g.clone());
                    }
                    sink.put(*b, g);
                }
                Op::Sub { a, b } => {
                    if sink.wants(*a) {
                        sink.put(*a, g.clone());
                    }
                    sink.put(*b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul { a, b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if sink.wants(*a) {
                        sink.put(*a, g.iter().zip(bv).map(|(&gi, &q)| gi * q).collect());
                    }
                    if sink.wants(*b) {
                        sink.put(*b, g.iter().zip(av).map(|(&gi, &p)| gi * p).collect());
                    }
                }
                Op::Sum { x } => {
                    sink.put(*x, vec![g[0]; nodes[x.0].value.numel()]);
                }
                Op::Reshape { x } => {
                    sink.put(*x, g);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let l = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / T::of(labels.len() as f64);
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (row, &y) in dz.chunks_mut(l).zip(labels) {
                        row[y] -= scale;
                    }
                    sink.put(*logits, dz);
                }
                Op::MseLoss { pred, target } => {
                    let p = nodes[pred.0].value.data();
                    let t = nodes[target.0].value.data();
                    let scale = g[0] / T::of(p.len() as f64);
                    let diff: Vec<T> = p.iter().zip(t).map(|(&a, &b)| (a - b) * scale).collect();
                    if sink.wants(*target) {
                        sink.put(*target, diff.iter().map(|&v| -v).collect());
                    }
                    sink.put(*pred, diff);
                }
            }
        }
        Ok(())
    }
}

/// Routes gradient contributions into the adjoint table, skipping inputs that
/// do not require gradients.
struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    adj: &'a mut [Option<Vec<T>>],
    scale: Option<T>,
}

impl<T: Real> Sink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn put(&mut self, v: Var, mut contrib: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        if let Some(s) = self.scale {
            contrib.iter_mut().for_each(|c| *c *= s);
        }
        match &mut self.adj[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn put_opt(&mut self, v: Var, contrib: Option<Vec<T>>) {
        if let Some(c) = contrib {
            self.put(v, c);
        }
    }
}
