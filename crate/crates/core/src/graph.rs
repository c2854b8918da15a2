//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly, appends a node holding its output and whatever its backward pass
//! needs, and returns a [`NodeId`]. Nodes are only ever appended, so the node
//! list is already in topological order and [`Graph::backward`] is a single
//! reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{group_stats, Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        /// im2col matrices, one `K x P` block per sample; empty when the
        /// weight does not need a gradient.
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    SpatialMean {
        x: NodeId,
    },
    SpatialStd {
        x: NodeId,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    Relu {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Tanh {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    UpsampleNearest {
        x: NodeId,
        factor: usize,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    BceWithLogits {
        x: NodeId,
        target: f64,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::SpatialMean { .. } => "spatial_mean",
            Op::SpatialStd { .. } => "spatial_std",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Abs { .. } => "abs",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat { parts } => parts.clone(),
            Op::InstanceNorm { x, .. }
            | Op::SpatialMean { x }
            | Op::SpatialStd { x, .. }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::LeakyRelu { x, .. }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::Abs { x }
            | Op::UpsampleNearest { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::BceWithLogits { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Scales every input gradient produced by one op kind. Only used to build
/// negative controls for the gradient checker.
#[derive(Clone, Copy, Debug)]
pub struct BackwardFault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Debug)]
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    frozen: BTreeMap<String, NodeId>,
    grads: Option<Vec<Option<Tensor<T>>>>,
    fault: Option<BackwardFault>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: BTreeMap::new(),
            grads: None,
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Named leaf that is read but not trained in this graph.
    pub fn frozen(&mut self, name: &str, t: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.frozen.get(name) {
            return id;
        }
        let id = self.push(t.clone(), Op::Leaf, false);
        self.frozen.insert(name.to_string(), id);
        id
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Which side of its kink every input of a piecewise-linear op
    /// (relu, leaky_relu, abs) lies on, in node order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } | Op::LeakyRelu { x, .. } | Op::Abs { x } = node.op {
                out.extend(self.value(x).data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    // ---- ops ---------------------------------------------------------------

    /// 2-D cross-correlation. `w` is `(Cout, Cin, kH, kW)`, `b` is `(1, Cout, 1, 1)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [n, cin, h, wd] = xs.0;
        let [cout, wcin, kh, kw] = ws.0;
        if wcin != cin {
            return Err(Error::ChannelMismatch { op: "conv2d", expected: wcin, got: cin });
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != Shape::new(1, cout, 1, 1) {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: bs, rhs: Shape::new(1, cout, 1, 1) });
            }
        }
        let (ho, wo) = conv_out_dims(h, wd, kh, kw, stride, pad)?;
        let geom = ConvGeom { cin, h, w: wd, kh, kw, stride, pad, ho, wo };
        let k = cin * kh * kw;
        let p = ho * wo;
        let keep_cols = self.requires_grad(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * cout * p];
        let mut col = vec![T::zero(); k * p];
        let mut cols = Vec::new();
        for i in 0..n {
            geom.im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], &mut col);
            T::gemm(
                cout,
                k,
                p,
                T::one(),
                wv,
                k as isize,
                1,
                &col,
                p as isize,
                1,
                T::zero(),
                &mut out[i * cout * p..(i + 1) * cout * p],
                p as isize,
                1,
            );
            if keep_cols {
                cols.extend_from_slice(&col);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (plane, &bias) in out.chunks_exact_mut(p).zip(bv.iter().cycle()) {
                for v in plane {
                    *v += bias;
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(n, cout, ho, wo), out)?;
        self.push_op(value, Op::Conv2d { x, w, b, stride, pad, cols })
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] in its input.
    /// `w` is `(Cin, Cout, kH, kW)`; the output side is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let [n, cin, h, wd] = self.shape(x).0;
        let [wcin, cout, kh, kw] = self.shape(w).0;
        if wcin != cin {
            return Err(Error::ChannelMismatch { op: "conv_transpose2d", expected: wcin, got: cin });
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != Shape::new(1, cout, 1, 1) {
                return Err(Error::ShapeMismatch { op: "conv_transpose2d bias", lhs: bs, rhs: Shape::new(1, cout, 1, 1) });
            }
        }
        if stride == 0 || h == 0 || wd == 0 || (h - 1) * stride + kh <= 2 * pad || (wd - 1) * stride + kw <= 2 * pad {
            return Err(Error::InvalidDims(format!(
                "conv_transpose2d: {h}x{wd} input, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let (hu, wu) = ((h - 1) * stride + kh - 2 * pad, (wd - 1) * stride + kw - 2 * pad);
        let geom = ConvGeom { cin: cout, h: hu, w: wu, kh, kw, stride, pad, ho: h, wo: wd };
        let k = cout * kh * kw;
        let p = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * cout * hu * wu];
        let mut col = vec![T::zero(); k * p];
        for i in 0..n {
            T::gemm(k, cin, p, T::one(), wv, 1, k as isize, &xv[i * cin * p..(i + 1) * cin * p], p as isize, 1, T::zero(), &mut col, p as isize, 1);
            geom.col2im(&col, &mut out[i * cout * hu * wu..(i + 1) * cout * hu * wu]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (plane, &bias) in out.chunks_exact_mut(hu * wu).zip(bv.iter().cycle()) {
                for v in plane {
                    *v += bias;
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(n, cout, hu, wu), out)?;
        self.push_op(value, Op::ConvTranspose2d { x, w, b, stride, pad })
    }

    /// Per-(sample, channel) standardization with no affine parameters.
    pub fn instance_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let hw = xs.spatial();
        if hw == 0 {
            return Err(Error::DegenerateSpatial(xs));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xs.n() * xs.c());
        for plane in xv.chunks_exact(hw) {
            let (mean, std) = group_stats(plane);
            inv_std.push(1.0 / std);
            out.extend(plane.iter().map(|v| T::from_f64((v.as_f64() - mean) / std)));
        }
        let value = Tensor::from_vec(xs, out)?;
        self.push_op(value, Op::InstanceNorm { x, inv_std })
    }

    /// Spatial average, `(N,C,H,W) -> (N,C,1,1)`.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let hw = xs.spatial();
        if hw == 0 {
            return Err(Error::DegenerateSpatial(xs));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| T::from_f64(group_stats(p).0))
            .collect();
        let value = Tensor::from_vec(Shape::new(xs.n(), xs.c(), 1, 1), data)?;
        self.push_op(value, Op::SpatialMean { x })
    }

    /// Stabilized spatial standard deviation, `(N,C,H,W) -> (N,C,1,1)`.
    pub fn spatial_std(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let hw = xs.spatial();
        if hw == 0 {
            return Err(Error::DegenerateSpatial(xs));
        }
        let (mean, std): (Vec<f64>, Vec<f64>) = self.value(x).data().chunks_exact(hw).map(group_stats).unzip();
        let data = std.iter().map(|&s| T::from_f64(s)).collect();
        let value = Tensor::from_vec(Shape::new(xs.n(), xs.c(), 1, 1), data)?;
        self.push_op(value, Op::SpatialStd { x, mean, std })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push_op(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push_op(value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push_op(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        self.push_op(value, Op::Scale { x, factor: f })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(value, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let s = T::from_f64(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push_op(value, Op::LeakyRelu { x, slope: s })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.tanh());
        self.push_op(value, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| T::from_f64(sigmoid(v.as_f64())));
        self.push_op(value, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.abs());
        self.push_op(value, Op::Abs { x })
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::InvalidDims("upsample factor 0".into()));
        }
        let [n, c, h, w] = self.shape(x).0;
        let src = self.value(x);
        let value = Tensor::from_fn(Shape::new(n, c, h * factor, w * factor), |[i, j, y, x]| {
            src[[i, j, y / factor, x / factor]]
        });
        self.push_op(value, Op::UpsampleNearest { x, factor })
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::InvalidDims("concat of nothing".into()))?;
        let s0 = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(Error::ShapeMismatch { op: "concat", lhs: s0, rhs: s });
            }
            c_total += s.c();
        }
        let hw = s0.spatial();
        let mut data = Vec::with_capacity(s0.n() * c_total * hw);
        for i in 0..s0.n() {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape().c() * hw;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let value = Tensor::from_vec(s0.with_c(c_total), data)?;
        self.push_op(value, Op::Concat { parts: parts.to_vec() })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(T::from_f64(self.value(x).sum_f64()));
        self.push_op(value, Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let value = Tensor::scalar(T::from_f64(t.sum_f64() / t.len() as f64));
        self.push_op(value, Op::Mean { x })
    }

    /// Mean binary cross-entropy of logits against a constant label.
    pub fn bce_with_logits(&mut self, x: NodeId, target: f64) -> Result<NodeId> {
        let t = self.value(x);
        let total: f64 = t
            .data()
            .iter()
            .map(|v| {
                let z = v.as_f64();
                z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let value = Tensor::scalar(T::from_f64(total / t.len() as f64));
        self.push_op(value, Op::BceWithLogits { x, target })
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Running it twice without
    /// [`Graph::zero_grad`] in between is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::GradientsNotReset);
        }
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let mut contributions = self.backward_node(idx, &gout)?;
            if let Some(fault) = self.fault.filter(|f| f.op == node.op.name()) {
                let f = T::from_f64(fault.factor);
                for (_, g) in &mut contributions {
                    for v in g.data_mut() {
                        *v = *v * f;
                    }
                }
            }
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        // only leaf gradients survive the sweep
        self.grads = Some(grads);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(id.0)?.as_ref()
    }

    /// Gradient of a named parameter; zeros when it is disconnected from the loss.
    pub fn param_grad(&self, name: &str) -> Option<Tensor<T>> {
        let id = self.param_node(name)?;
        self.grads.as_ref()?;
        Some(self.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(id))))
    }

    /// Gradients for every tensor of `store`, zero-filled for parameters the
    /// graph never touched.
    pub fn gradients(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::new();
        for (name, t) in store.iter() {
            let g = self.param_grad(name).unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g);
        }
        out
    }

    fn backward_node(&self, idx: usize, gout: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let [n, cin, h, wd] = self.shape(*x).0;
                let [cout, _, kh, kw] = self.shape(*w).0;
                let [_, _, ho, wo] = y.shape().0;
                let geom = ConvGeom { cin, h, w: wd, kh, kw, stride: *stride, pad: *pad, ho, wo };
                let k = cin * kh * kw;
                let p = ho * wo;
                let g = gout.data();
                if rg(*w) {
                    let mut dw = vec![T::zero(); cout * k];
                    for i in 0..n {
                        T::gemm(
                            cout,
                            p,
                            k,
                            T::one(),
                            &g[i * cout * p..(i + 1) * cout * p],
                            p as isize,
                            1,
                            &cols[i * k * p..(i + 1) * k * p],
                            1,
                            p as isize,
                            T::one(),
                            &mut dw,
                            k as isize,
                            1,
                        );
                    }
                    out.push((*w, Tensor::from_vec(self.shape(*w), dw)?));
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut db = vec![T::zero(); cout];
                        for (plane, slot) in g.chunks_exact(p).zip((0..cout).cycle()) {
                            let s: f64 = plane.iter().map(|v| v.as_f64()).sum();
                            db[slot] += T::from_f64(s);
                        }
                        out.push((*b, Tensor::from_vec(self.shape(*b), db)?));
                    }
                }
                if rg(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = vec![T::zero(); n * cin * h * wd];
                    let mut dcol = vec![T::zero(); k * p];
                    for i in 0..n {
                        T::gemm(
                            k,
                            cout,
                            p,
                            T::one(),
                            wv,
                            1,
                            k as isize,
                            &g[i * cout * p..(i + 1) * cout * p],
                            p as isize,
                            1,
                            T::zero(),
                            &mut dcol,
                            p as isize,
                            1,
                        );
                        geom.col2im(&dcol, &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                    }
                    out.push((*x, Tensor::from_vec(self.shape(*x), dx)?));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let [n, cin, h, wd] = self.shape(*x).0;
                let [_, cout, kh, kw] = self.shape(*w).0;
                let [_, _, hu, wu] = y.shape().0;
                let geom = ConvGeom { cin: cout, h: hu, w: wu, kh, kw, stride: *stride, pad: *pad, ho: h, wo: wd };
                let k = cout * kh * kw;
                let p = h * wd;
                let g = gout.data();
                let (need_w, need_x) = (rg(*w), rg(*x));
                let mut dw = vec![T::zero(); cin * k];
                let mut dx = vec![T::zero(); if need_x { n * cin * p } else { 0 }];
                let mut col = vec![T::zero(); k * p];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if need_w || need_x {
                    for i in 0..n {
                        geom.im2col(&g[i * cout * hu * wu..(i + 1) * cout * hu * wu], &mut col);
                        if need_w {
                            T::gemm(cin, p, k, T::one(), &xv[i * cin * p..(i + 1) * cin * p], p as isize, 1, &col, 1, p as isize, T::one(), &mut dw, k as isize, 1);
                        }
                        if need_x {
                            T::gemm(cin, k, p, T::one(), wv, k as isize, 1, &col, p as isize, 1, T::zero(), &mut dx[i * cin * p..(i + 1) * cin * p], p as isize, 1);
                        }
                    }
                }
                if need_w {
                    out.push((*w, Tensor::from_vec(self.shape(*w), dw)?));
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut db = vec![T::zero(); cout];
                        for (plane, slot) in g.chunks_exact(hu * wu).zip((0..cout).cycle()) {
                            let s: f64 = plane.iter().map(|v| v.as_f64()).sum();
                            db[slot] += T::from_f64(s);
                        }
                        out.push((*b, Tensor::from_vec(self.shape(*b), db)?));
                    }
                }
                if need_x {
                    out.push((*x, Tensor::from_vec(self.shape(*x), dx)?));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let hw = y.shape().spatial();
                let mut dx = Vec::with_capacity(y.len());
                for ((yp, gp), &is) in y.data().chunks_exact(hw).zip(gout.data().chunks_exact(hw)).zip(inv_std) {
                    let m = hw as f64;
                    let mean_g = gp.iter().map(|v| v.as_f64()).sum::<f64>() / m;
                    let mean_gy = gp.iter().zip(yp).map(|(g, y)| g.as_f64() * y.as_f64()).sum::<f64>() / m;
                    dx.extend(
                        gp.iter()
                            .zip(yp)
                            .map(|(g, y)| T::from_f64(is * (g.as_f64() - mean_g - y.as_f64() * mean_gy))),
                    );
                }
                out.push((*x, Tensor::from_vec(y.shape(), dx)?));
            }
            Op::SpatialMean { x } => {
                let xs = self.shape(*x);
                let hw = xs.spatial();
                let mut dx = Vec::with_capacity(xs.numel());
                for &g in gout.data() {
                    let v = T::from_f64(g.as_f64() / hw as f64);
                    dx.extend(std::iter::repeat(v).take(hw));
                }
                out.push((*x, Tensor::from_vec(xs, dx)?));
            }
            Op::SpatialStd { x, mean, std } => {
                let xt = self.value(*x);
                let hw = xt.shape().spatial();
                let mut dx = Vec::with_capacity(xt.len());
                for (((plane, &g), &mu), &sd) in xt.data().chunks_exact(hw).zip(gout.data()).zip(mean).zip(std) {
                    let scale = g.as_f64() / (hw as f64 * sd);
                    dx.extend(plane.iter().map(|v| T::from_f64(scale * (v.as_f64() - mu))));
                }
                out.push((*x, Tensor::from_vec(xt.shape(), dx)?));
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    out.push((*a, reduce_to(gout, self.shape(*a))));
                }
                if rg(*b) {
                    out.push((*b, reduce_to(gout, self.shape(*b))));
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    out.push((*a, reduce_to(gout, self.shape(*a))));
                }
                if rg(*b) {
                    out.push((*b, reduce_to(gout, self.shape(*b)).map(|v| -v)));
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let prod = broadcast_binary(gout, self.value(*b), "mul backward", |g, v| g * v)?;
                    out.push((*a, reduce_to(&prod, self.shape(*a))));
                }
                if rg(*b) {
                    let prod = broadcast_binary(gout, self.value(*a), "mul backward", |g, v| g * v)?;
                    out.push((*b, reduce_to(&prod, self.shape(*b))));
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                out.push((*x, gout.map(|g| g * f)));
            }
            Op::Relu { x } => {
                let d = gout.zip_map(self.value(*x), "relu", |g, v| if v > T::zero() { g } else { T::zero() })?;
                out.push((*x, d));
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                let d = gout.zip_map(self.value(*x), "leaky_relu", |g, v| if v > T::zero() { g } else { g * s })?;
                out.push((*x, d));
            }
            Op::Tanh { x } => {
                let d = gout.zip_map(y, "tanh", |g, t| g * (T::one() - t * t))?;
                out.push((*x, d));
            }
            Op::Sigmoid { x } => {
                let d = gout.zip_map(y, "sigmoid", |g, s| g * s * (T::one() - s))?;
                out.push((*x, d));
            }
            Op::Abs { x } => {
                let d = gout.zip_map(self.value(*x), "abs", |g, v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?;
                out.push((*x, d));
            }
            Op::UpsampleNearest { x, factor } => {
                let xs = self.shape(*x);
                let mut dx = Tensor::zeros(xs);
                let [n, c, h, w] = gout.shape().0;
                for i in 0..n {
                    for j in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                dx[[i, j, yy / factor, xx / factor]] += gout[[i, j, yy, xx]];
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c();
                    if rg(p) {
                        out.push((p, gout.channels(start, c)?));
                    }
                    start += c;
                }
            }
            Op::Sum { x } => {
                let g = gout.data()[0];
                out.push((*x, Tensor::full(self.shape(*x), g)));
            }
            Op::Mean { x } => {
                let xs = self.shape(*x);
                let g = T::from_f64(gout.data()[0].as_f64() / xs.numel() as f64);
                out.push((*x, Tensor::full(xs, g)));
            }
            Op::BceWithLogits { x, target } => {
                let xt = self.value(*x);
                let scale = gout.data()[0].as_f64() / xt.len() as f64;
                out.push((*x, xt.map(|v| T::from_f64(scale * (sigmoid(v.as_f64()) - target)))));
            }
        }
        Ok(out)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::InvalidDims(format!(
            "conv of {h}x{w} with kernel {kh}x{kw}, stride {stride}, pad {pad} has no output"
        )));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Source coordinate for output index `o` and kernel tap `t`, if in bounds.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + t) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }

    /// Output columns `[lo, hi)` whose tap `j` lands inside the input row.
    #[inline]
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if j >= p { 0 } else { (p - j).div_ceil(s) };
        // need ox * s + j - p <= w - 1
        let hi = if self.w + p > j { ((self.w + p - j - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * p;
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.ho {
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let Some(sy) = self.src(oy, i, self.h) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src_row = &x[(ci * self.h + sy) * self.w..(ci * self.h + sy + 1) * self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo < hi {
                            let first = lo * self.stride + j - self.pad;
                            if self.stride == 1 {
                                dst[lo..hi].copy_from_slice(&src_row[first..first + (hi - lo)]);
                            } else {
                                for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = src_row[first + k * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * p;
                    let (lo, hi) = self.valid_cols(j);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * self.stride + j - self.pad;
                    for oy in 0..self.ho {
                        let Some(sy) = self.src(oy, i, self.h) else { continue };
                        let base = (ci * self.h + sy) * self.w + first;
                        let src = &col[row + oy * self.wo + lo..row + oy * self.wo + hi];
                        if self.stride == 1 {
                            for (d, &v) in dx[base..base + (hi - lo)].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (k, &v) in src.iter().enumerate() {
                                dx[base + k * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output shape when broadcasting `a` against `b`: every dim must agree or be 1.
pub fn broadcast_shape(a: Shape, b: Shape, op: &'static str) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a.0[i], b.0[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::ShapeMismatch { op, lhs: a, rhs: b }),
        };
    }
    Ok(Shape(out))
}

fn broadcast_binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, op, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape(), op)?;
    let sa = a.shape().broadcast_strides();
    let sb = b.shape().broadcast_strides();
    let (ad, bd) = (a.data(), b.data());
    let [n, c, h, w] = shape.0;
    let mut data = Vec::with_capacity(shape.numel());
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let oa = i * sa[0] + j * sa[1] + y * sa[2];
                let ob = i * sb[0] + j * sb[1] + y * sb[2];
                for x in 0..w {
                    data.push(f(ad[oa + x * sa[3]], bd[ob + x * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Sums `g` over the axes along which `target` was broadcast.
fn reduce_to<T: Element>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let st = target.broadcast_strides();
    let mut acc = vec![0.0f64; target.numel()];
    let [n, c, h, w] = g.shape().0;
    let gd = g.data();
    let mut k = 0;
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let o = i * st[0] + j * st[1] + y * st[2];
                for x in 0..w {
                    acc[o + x * st[3]] += gd[k].as_f64();
                    k += 1;
                }
            }
        }
    }
    Tensor::from_vec(target, acc.into_iter().map(T::from_f64).collect()).expect("target shape")
}
