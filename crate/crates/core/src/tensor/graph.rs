use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvDims, ConvGeom, Exec};
use super::{conv_out_len, conv_transpose_out_len, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive identifier recorded on each node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Dropout,
    InstanceNorm,
    Concat,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sum,
    Mean,
    Abs,
    ClampLog,
    Custom,
}

/// User-supplied backward rule for [`Graph::custom`].
pub trait Backward<T: Real>: Send {
    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d { dims: ConvDims, cols: Vec<T> },
    ConvTranspose2d { dims: ConvDims },
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Tanh,
    Dropout { mask: Vec<T> },
    InstanceNorm { xhat: Vec<T>, inv_std: Vec<T>, channels: usize, plane: usize },
    Concat { left_channels: usize, right_channels: usize, plane: usize },
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar,
    Sum,
    Mean,
    Abs,
    ClampLog(T),
    Custom(Box<dyn Backward<T>>),
}

impl<T: Real> Op<T> {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Conv2d { .. } => OpTag::Conv2d,
            Op::ConvTranspose2d { .. } => OpTag::ConvTranspose2d,
            Op::Relu => OpTag::Relu,
            Op::LeakyRelu(_) => OpTag::LeakyRelu,
            Op::Sigmoid => OpTag::Sigmoid,
            Op::Tanh => OpTag::Tanh,
            Op::Dropout { .. } => OpTag::Dropout,
            Op::InstanceNorm { .. } => OpTag::InstanceNorm,
            Op::Concat { .. } => OpTag::Concat,
            Op::Add => OpTag::Add,
            Op::Sub => OpTag::Sub,
            Op::Mul => OpTag::Mul,
            Op::Scale(_) => OpTag::Scale,
            Op::AddScalar => OpTag::AddScalar,
            Op::Sum => OpTag::Sum,
            Op::Mean => OpTag::Mean,
            Op::Abs => OpTag::Abs,
            Op::ClampLog(_) => OpTag::ClampLog,
            Op::Custom(_) => OpTag::Custom,
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep. Gradients accumulate across
/// [`Graph::backward`] calls until [`Graph::zero_grad`].
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    exec: Exec,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            exec: Exec::default(),
        }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Copy of `x` cut off from the gradient path.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, `None` if the node was never reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<T> {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape().to_vec()))
    }

    pub fn op_tag(&self, id: NodeId) -> OpTag {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: Vec<NodeId>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                module: "tensor",
                op: name,
                detail: format!("forward output of shape {:?}", value.shape()),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            parents,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("tensor", op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(Error::invalid("tensor", OP, "stride must be positive"));
        }
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        let (co, ci, kh, kw) = self.value(kernel).dims4(OP)?;
        if ci != c {
            return Err(Error::shape(
                "tensor",
                OP,
                format!("input has C_in={c} but kernel expects C_in={ci}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("tensor", OP, format!("kernel must be square, got {kh}x{kw}")));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::shape(
                "tensor",
                OP,
                format!("bias shape {:?}, expected [{co}]", self.value(bias).shape()),
            ));
        }
        let (Some(oh), Some(ow)) = (conv_out_len(h, kh, stride, padding), conv_out_len(w, kw, stride, padding)) else {
            return Err(Error::shape(
                "tensor",
                OP,
                format!("kernel {kh} larger than padded input {h}x{w} (padding {padding})"),
            ));
        };
        let dims = ConvDims {
            batch: n,
            in_channels: c,
            out_channels: co,
            geom: ConvGeom {
                channels: c,
                height: h,
                width: w,
                kernel: kh,
                stride,
                padding,
                out_h: oh,
                out_w: ow,
            },
        };
        let (out, cols) = kernels::conv2d_forward(
            self.exec,
            &dims,
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        self.push(OP, value, Op::Conv2d { dims, cols }, vec![x, kernel, bias])
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        const OP: &str = "conv_transpose2d";
        if stride == 0 {
            return Err(Error::invalid("tensor", OP, "stride must be positive"));
        }
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        let (ci, co, kh, kw) = self.value(kernel).dims4(OP)?;
        if ci != c {
            return Err(Error::shape(
                "tensor",
                OP,
                format!("input has C_in={c} but kernel expects C_in={ci}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("tensor", OP, format!("kernel must be square, got {kh}x{kw}")));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::shape(
                "tensor",
                OP,
                format!("bias shape {:?}, expected [{co}]", self.value(bias).shape()),
            ));
        }
        let (Some(oh), Some(ow)) = (
            conv_transpose_out_len(h, kh, stride, padding),
            conv_transpose_out_len(w, kw, stride, padding),
        ) else {
            return Err(Error::shape(
                "tensor",
                OP,
                format!("computed output size is not positive for input {h}x{w}, kernel {kh}, stride {stride}, padding {padding}"),
            ));
        };
        let dims = ConvDims {
            batch: n,
            in_channels: c,
            out_channels: co,
            geom: ConvGeom {
                channels: co,
                height: oh,
                width: ow,
                kernel: kh,
                stride,
                padding,
                out_h: h,
                out_w: w,
            },
        };
        let out = kernels::conv_transpose2d_forward(
            self.exec,
            &dims,
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        self.push(OP, value, Op::ConvTranspose2d { dims }, vec![x, kernel, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push("relu", v, Op::Relu, vec![x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid("tensor", "leaky_relu", format!("slope {slope} outside (0, 1)")));
        }
        let s = T::lit(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * s });
        self.push("leaky_relu", v, Op::LeakyRelu(s), vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a.tanh());
        self.push("tanh", v, Op::Tanh, vec![x])
    }

    /// Inverted dropout. With `active == false` the input passes unchanged.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64, active: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("tensor", "dropout", format!("rate {rate} outside [0, 1)")));
        }
        let n = self.value(x).numel();
        let mask: Vec<T> = if active {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = T::lit(1.0 / (1.0 - rate));
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                .collect()
        } else {
            vec![T::one(); n]
        };
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", v, Op::Dropout { mask }, vec![x])
    }

    /// Per-(sample, channel) normalization with learned per-channel affine.
    pub fn instance_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, epsilon: f64) -> Result<NodeId> {
        const OP: &str = "instance_norm";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        let plane = h * w;
        if plane < 2 {
            return Err(Error::invalid(
                "tensor",
                OP,
                format!("spatial plane {h}x{w} is degenerate, need at least 2 values"),
            ));
        }
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.value(id).shape() != [c] {
                return Err(Error::shape(
                    "tensor",
                    OP,
                    format!("{name} shape {:?}, expected [{c}]", self.value(id).shape()),
                ));
            }
        }
        let eps = T::lit(epsilon);
        let m = T::from_usize(plane).unwrap();
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); n * c * plane];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c * plane];
        for (p, src) in xs.chunks(plane).enumerate() {
            let ch = p % c;
            let first = src[0];
            let inv = if src.iter().all(|&v| v == first) {
                // constant plane: normalized value is exactly zero
                T::one() / eps.sqrt()
            } else {
                let mean = src.iter().copied().sum::<T>() / m;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let inv = T::one() / (var + eps).sqrt();
                for (i, &v) in src.iter().enumerate() {
                    xhat[p * plane + i] = (v - mean) * inv;
                }
                inv
            };
            inv_std[p] = inv;
            for i in 0..plane {
                out[p * plane + i] = xhat[p * plane + i] * g[ch] + b[ch];
            }
        }
        let v = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            OP,
            v,
            Op::InstanceNorm {
                xhat,
                inv_std,
                channels: c,
                plane,
            },
            vec![x, gain, bias],
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        const OP: &str = "concat_channels";
        let (na, ca, ha, wa) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "tensor",
                OP,
                format!("(N, H, W) of ({na}, {ha}, {wa}) vs ({nb}, {hb}, {wb})"),
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for s in 0..na {
            out.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let v = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        self.push(
            OP,
            v,
            Op::Concat {
                left_channels: ca,
                right_channels: cb,
                plane,
            },
            vec![a, b],
        )
    }

    fn zip_with(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, kind: Op<T>) -> Result<NodeId> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op, v, kind, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let c = T::lit(factor);
        let v = self.value(x).map(|a| a * c);
        self.push("scale", v, Op::Scale(c), vec![x])
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: f64) -> Result<NodeId> {
        let c = T::lit(offset);
        let v = self.value(x).map(|a| a + c);
        self.push("add_scalar", v, Op::AddScalar, vec![x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / T::from_usize(xv.numel()).unwrap());
        self.push("mean", v, Op::Mean, vec![x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a.abs());
        self.push("abs", v, Op::Abs, vec![x])
    }

    /// `ln(max(x, eps))`.
    pub fn clamp_log(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::invalid("tensor", "clamp_log", format!("epsilon {eps} must be positive")));
        }
        let e = T::lit(eps);
        let v = self.value(x).map(|a| a.max(e).ln());
        self.push("clamp_log", v, Op::ClampLog(e), vec![x])
    }

    /// Node with a caller-provided value and backward rule.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor<T>, rule: Box<dyn Backward<T>>) -> Result<NodeId> {
        self.push("custom", value, Op::Custom(rule), inputs.to_vec())
    }

    /// Reverse sweep from a scalar `loss`, accumulating into stored grads.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::shape(
                "tensor",
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(go) = local[i].take() else { continue };
            let contributions = self.node_backward(i, &go);
            for (p, g) in contributions {
                match &mut local[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            if !go.is_finite() {
                return Err(Error::NonFinite {
                    module: "tensor",
                    op: "backward",
                    detail: format!("gradient of node {i} ({:?})", self.nodes[i].op.tag()),
                });
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&go),
                slot @ None => *slot = Some(go),
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, go: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[i];
        let wants = |k: usize| self.nodes[node.parents[k].0].requires_grad;
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let mut out = Vec::with_capacity(node.parents.len());
        let mut emit = |k: usize, data: Vec<T>| {
            let shape = self.nodes[node.parents[k].0].value.shape().to_vec();
            out.push((node.parents[k], Tensor { shape, data }));
        };
        let g = go.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { dims, cols } => {
                let mut dx = wants(0).then(|| vec![T::zero(); pv(0).numel()]);
                let mut dk = wants(1).then(|| vec![T::zero(); pv(1).numel()]);
                let mut db = wants(2).then(|| vec![T::zero(); pv(2).numel()]);
                kernels::conv2d_backward(
                    self.exec,
                    dims,
                    cols,
                    pv(1).data(),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (k, d) in [dx, dk, db].into_iter().enumerate() {
                    if let Some(d) = d {
                        emit(k, d);
                    }
                }
            }
            Op::ConvTranspose2d { dims } => {
                let mut dx = wants(0).then(|| vec![T::zero(); pv(0).numel()]);
                let mut dk = wants(1).then(|| vec![T::zero(); pv(1).numel()]);
                let mut db = wants(2).then(|| vec![T::zero(); pv(2).numel()]);
                kernels::conv_transpose2d_backward(
                    self.exec,
                    dims,
                    pv(0).data(),
                    pv(1).data(),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (k, d) in [dx, dk, db].into_iter().enumerate() {
                    if let Some(d) = d {
                        emit(k, d);
                    }
                }
            }
            Op::Relu => {
                if wants(0) {
                    let d = pv(0)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gy)| if x > T::zero() { gy } else { T::zero() })
                        .collect();
                    emit(0, d);
                }
            }
            Op::LeakyRelu(s) => {
                if wants(0) {
                    let d = pv(0)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gy)| if x > T::zero() { gy } else { gy * *s })
                        .collect();
                    emit(0, d);
                }
            }
            Op::Sigmoid => {
                if wants(0) {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gy)| gy * y * (T::one() - y))
                        .collect();
                    emit(0, d);
                }
            }
            Op::Tanh => {
                if wants(0) {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gy)| gy * (T::one() - y * y))
                        .collect();
                    emit(0, d);
                }
            }
            Op::Dropout { mask } => {
                if wants(0) {
                    emit(0, mask.iter().zip(g).map(|(&m, &gy)| m * gy).collect());
                }
            }
            Op::InstanceNorm {
                xhat,
                inv_std,
                channels,
                plane,
            } => {
                let gain = pv(1).data();
                let m = T::from_usize(*plane).unwrap();
                let mut dx = wants(0).then(|| vec![T::zero(); pv(0).numel()]);
                let mut dgain = vec![T::zero(); *channels];
                let mut dbias = vec![T::zero(); *channels];
                for (p, gp) in g.chunks(*plane).enumerate() {
                    let ch = p % channels;
                    let xh = &xhat[p * plane..(p + 1) * plane];
                    let sum_g: T = gp.iter().copied().sum();
                    let sum_gx: T = gp.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    dgain[ch] = dgain[ch] + sum_gx;
                    dbias[ch] = dbias[ch] + sum_g;
                    if let Some(dx) = dx.as_mut() {
                        // d xhat = g * gain; dx = inv/M (M dxh - sum dxh - xhat sum(dxh xhat))
                        let scale = gain[ch] * inv_std[p] / m;
                        for i in 0..*plane {
                            dx[p * plane + i] = scale * (m * gp[i] - sum_g - xh[i] * sum_gx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    emit(0, dx);
                }
                if wants(1) {
                    emit(1, dgain);
                }
                if wants(2) {
                    emit(2, dbias);
                }
            }
            Op::Concat {
                left_channels,
                right_channels,
                plane,
            } => {
                let (la, lb) = (left_channels * plane, right_channels * plane);
                let batch = g.len() / (la + lb);
                let mut da = Vec::with_capacity(batch * la);
                let mut db = Vec::with_capacity(batch * lb);
                for s in g.chunks(la + lb) {
                    da.extend_from_slice(&s[..la]);
                    db.extend_from_slice(&s[la..]);
                }
                if wants(0) {
                    emit(0, da);
                }
                if wants(1) {
                    emit(1, db);
                }
            }
            Op::Add => {
                if wants(0) {
                    emit(0, g.to_vec());
                }
                if wants(1) {
                    emit(1, g.to_vec());
                }
            }
            Op::Sub => {
                if wants(0) {
                    emit(0, g.to_vec());
                }
                if wants(1) {
                    emit(1, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul => {
                if wants(0) {
                    emit(0, pv(1).data().iter().zip(g).map(|(&b, &gy)| b * gy).collect());
                }
                if wants(1) {
                    emit(1, pv(0).data().iter().zip(g).map(|(&a, &gy)| a * gy).collect());
                }
            }
            Op::Scale(c) => {
                if wants(0) {
                    emit(0, g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::AddScalar => {
                if wants(0) {
                    emit(0, g.to_vec());
                }
            }
            Op::Sum => {
                if wants(0) {
                    emit(0, vec![g[0]; pv(0).numel()]);
                }
            }
            Op::Mean => {
                if wants(0) {
                    let n = pv(0).numel();
                    emit(0, vec![g[0] / T::from_usize(n).unwrap(); n]);
                }
            }
            Op::Abs => {
                if wants(0) {
                    let d = pv(0)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gy)| {
                            if x > T::zero() {
                                gy
                            } else if x < T::zero() {
                                -gy
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    emit(0, d);
                }
            }
            Op::ClampLog(eps) => {
                if wants(0) {
                    let d = pv(0)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gy)| if x > *eps { gy / x } else { T::zero() })
                        .collect();
                    emit(0, d);
                }
            }
            Op::Custom(rule) => {
                let inputs: Vec<&Tensor<T>> = (0..node.parents.len()).map(pv).collect();
                let grads = rule.backward(&inputs, &node.value, go);
                for (k, d) in grads.into_iter().enumerate() {
                    if wants(k) {
                        emit(k, d.into_data());
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_one_by_one_conv() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn hand_cross_correlation() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_shapes_and_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3, 64, 64]));
        let k = g.constant(Tensor::zeros(vec![8, 3, 4, 4]));
        let b = g.constant(Tensor::zeros(vec![8]));
        let y = g.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8, 32, 32]);

        let kt = g.constant(Tensor::zeros(vec![8, 3, 4, 4]));
        let bt = g.constant(Tensor::zeros(vec![3]));
        let up = g.conv_transpose2d(y, kt, bt, 2, 1).unwrap();
        assert_eq!(g.value(up).shape(), &[2, 3, 64, 64]);

        let bad = g.constant(Tensor::zeros(vec![8, 2, 4, 4]));
        let err = g.conv2d(x, bad, b, 1, 0).unwrap_err().to_string();
        assert!(err.contains("C_in=3") && err.contains("C_in=2"), "{err}");
        assert!(g.conv2d(x, k, b, 0, 0).is_err());

        let tiny = g.constant(Tensor::zeros(vec![1, 3, 2, 2]));
        assert!(g.conv2d(tiny, k, b, 1, 0).is_err());
        let one = g.constant(Tensor::zeros(vec![1, 8, 1, 1]));
        let k1 = g.constant(Tensor::zeros(vec![8, 3, 1, 1]));
        assert!(g.conv_transpose2d(one, k1, bt, 1, 1).is_err());
    }

    #[test]
    fn transposed_conv_hand_expansion() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 1], &[5.0]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv_transpose2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 10.0, 15.0, 20.0]);
    }

    #[test]
    fn activations() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, -2.0, 3.0]));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let l = g.leaky_relu(x, 0.2).unwrap();
        assert!((g.value(l).data()[1] + 0.4).abs() < 1e-15);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        assert!(g.leaky_relu(x, 1.0).is_err());
        assert!(g.leaky_relu(x, 0.0).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![1000], |i| i as f64 - 3.5));
        let off = g.dropout(x, 0.5, 9, false).unwrap();
        assert_eq!(g.value(off), g.value(x));
        let on = g.dropout(x, 0.5, 9, true).unwrap();
        let again = g.dropout(x, 0.5, 9, true).unwrap();
        assert_eq!(g.value(on), g.value(again));
        let zeros = g.value(on).data().iter().filter(|&&v| v == 0.0).count();
        assert!((400..600).contains(&zeros), "{zeros}");
        for (&y, &xv) in g.value(on).data().iter().zip(g.value(x).data()) {
            assert!(y == 0.0 || y == 2.0 * xv);
        }
        assert!(g.dropout(x, 1.0, 0, true).is_err());
        assert!(g.dropout(x, -0.1, 0, true).is_err());
    }

    #[test]
    fn instance_norm_cases() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(t(&[1], &[1.0]));
        let bias = g.constant(t(&[1], &[0.0]));
        let c = g.constant(Tensor::full(vec![1, 1, 2, 2], 0.1));
        let y = g.instance_norm(c, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t(&[1, 1, 1, 2], &[1.0, 3.0]));
        let y = g.instance_norm(x, gain, bias, 1e-5).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] + want).abs() < 1e-12);
        assert!((g.value(y).data()[1] - want).abs() < 1e-12);

        let g0 = g.constant(t(&[1], &[0.0]));
        let b7 = g.constant(t(&[1], &[7.0]));
        let y = g.instance_norm(x, g0, b7, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 7.0));

        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let err = g.instance_norm(one, gain, bias, 1e-5).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn backward_simple_functionals() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 5.0, 6.0]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);

        // accumulation without zeroing
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());

        let err = g.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn unreached_and_constant_nodes_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let p = g.mul(a, c).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 6.0]);
        assert!(g.grad(unused).is_none());
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1e308]));
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale", .. }));
    }
}
