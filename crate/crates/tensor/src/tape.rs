//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every operation appends one node holding its forward value. Calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints.
//! Nodes that do not depend on any gradient-requiring leaf are skipped.

use crate::ops;
use crate::{Error, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of an operation defined outside this crate.
///
/// Receives the forward inputs, the forward output and the adjoint of the
/// output; returns one optional adjoint per input (`None` means zero).
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

impl<F> Backward for F
where
    F: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>,
{
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        self(inputs, output, grad)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleChannels(Var, Vec<f64>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Resize(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    Reshape(Var),
    Warp(Var, Var),
    SoftmaxLeading(Var),
    SpatialSoftmax(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanAbs(Var),
    MeanSquare(Var),
    Custom(Vec<Var>, Box<dyn Backward>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies every leading slice of `a` (`C×…`) by `mask` (`1×…`).
    pub fn mul_broadcast(&mut self, a: Var, mask: Var) -> Result<Var> {
        let (av, mv) = (self.value(a), self.value(mask));
        if mv.rank() != av.rank() || mv.shape().first() != Some(&1) || mv.shape()[1..] != av.shape()[1..]
        {
            return Err(Error::Shape(format!(
                "mul_broadcast: {:?} by {:?}",
                av.shape(),
                mv.shape()
            )));
        }
        let plane = mv.len();
        let m = mv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| x * m[i % plane]).collect();
        let v = Tensor::new(av.shape(), data)?;
        self.push("mul_broadcast", v, Op::MulBroadcast(a, mask), &[a, mask])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * factor);
        self.push("scale", v, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + offset);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Multiplies leading slice `i` by `factors[i]`.
    pub fn scale_channels(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.shape().first() != Some(&factors.len()) {
            return Err(Error::Shape(format!(
                "scale_channels: {} factors for {:?}",
                factors.len(),
                av.shape()
            )));
        }
        let plane = av.len() / factors.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| x * factors[i / plane]).collect();
        let v = Tensor::new(av.shape(), data)?;
        self.push("scale_channels", v, Op::ScaleChannels(a, factors.to_vec()), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", v, Op::Conv { x, w, b, stride, pad }, &inputs)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let v = ops::avg_pool2(self.value(a))?;
        self.push("avg_pool2", v, Op::AvgPool2(a), &[a])
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let v = ops::upsample2(self.value(a))?;
        self.push("upsample2", v, Op::Upsample2(a), &[a])
    }

    pub fn resize(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let v = ops::resize_bilinear(self.value(a), h, w)?;
        self.push("resize", v, Op::Resize(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values)?;
        self.push("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    /// Slices `len` entries of the leading axis starting at `start`.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(start, len)?;
        self.push("narrow", v, Op::Narrow(a, start), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Bilinear backward warp, see [`ops::warp`].
    pub fn warp(&mut self, frame: Var, flow: Var) -> Result<Var> {
        let v = ops::warp(self.value(frame), self.value(flow))?;
        self.push("warp", v, Op::Warp(frame, flow), &[frame, flow])
    }

    pub fn softmax_leading(&mut self, a: Var) -> Result<Var> {
        let v = ops::softmax_leading(self.value(a))?;
        self.push("softmax", v, Op::SoftmaxLeading(a), &[a])
    }

    pub fn spatial_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let v = ops::spatial_softmax(self.value(a), temperature)?;
        self.push("spatial_softmax", v, Op::SpatialSoftmax(a, temperature), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn mean_abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().map(|x| x.abs()).sum::<f64>() / t.len() as f64);
        self.push("mean_abs", v, Op::MeanAbs(a), &[a])
    }

    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().map(|x| x * x).sum::<f64>() / t.len() as f64);
        self.push("mean_square", v, Op::MeanSquare(a), &[a])
    }

    /// Mean absolute difference between two equally shaped tensors.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.mean_abs(d)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: impl Backward + 'static,
    ) -> Result<Var> {
        self.push(name, value, Op::Custom(inputs.to_vec(), Box::new(backward)), inputs)
    }

    /// Reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, d) in self.node_backward(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` with respect to `params`; parameters the loss does
    /// not reach get an all-zero gradient.
    pub fn gradients(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let mut g = self.backward(loss)?;
        Ok(params
            .iter()
            .map(|&p| g.take(p).unwrap_or_else(|| Tensor::zeros(self.shape(p))))
            .collect())
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, g.zip_map(val(*b), |g, y| g * y)?));
                }
                if wants(*b) {
                    out.push((*b, g.zip_map(val(*a), |g, x| g * x)?));
                }
                out
            }
            Op::MulBroadcast(a, m) => {
                let (av, mv) = (val(*a), val(*m));
                let plane = mv.len();
                let mut out = Vec::new();
                if wants(*a) {
                    let d = g.data().iter().enumerate().map(|(i, &g)| g * mv.data()[i % plane]).collect();
                    out.push((*a, Tensor::new(av.shape(), d)?));
                }
                if wants(*m) {
                    let mut d = vec![0.0; plane];
                    for (i, (&g, &x)) in g.data().iter().zip(av.data()).enumerate() {
                        d[i % plane] += g * x;
                    }
                    out.push((*m, Tensor::new(mv.shape(), d)?));
                }
                out
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ScaleChannels(a, f) => {
                let plane = g.len() / f.len();
                let d = g.data().iter().enumerate().map(|(i, &x)| x * f[i / plane]).collect();
                vec![(*a, Tensor::new(g.shape(), d)?)]
            }
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?)],
            Op::LeakyRelu(a, s) => {
                vec![(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { s * g })?)]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?)],
            Op::Conv { x, w, b, stride, pad } => {
                let want = [wants(*x), wants(*w), b.is_some_and(wants)];
                let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), g, *stride, *pad, want)?;
                let mut out = Vec::new();
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    out.push((*b, d));
                }
                out
            }
            Op::AvgPool2(a) => vec![(*a, ops::avg_pool2_backward(val(*a).shape(), g))],
            Op::Upsample2(a) => vec![(*a, ops::upsample2_backward(val(*a).shape(), g))],
            Op::Resize(a) => vec![(*a, ops::resize_bilinear_backward(val(*a).shape(), g))],
            Op::Concat(parts) => {
                let mut out = Vec::new();
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape()[0];
                    if wants(*p) {
                        out.push((*p, g.narrow(start, len)?));
                    }
                    start += len;
                }
                out
            }
            Op::Narrow(a, start) => {
                let av = val(*a);
                let mut d = Tensor::zeros(av.shape());
                let plane: usize = av.shape()[1..].iter().product();
                d.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                vec![(*a, d)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
            Op::Warp(f, fl) => {
                let (df, dfl) = ops::warp_backward(val(*f), val(*fl), g, [wants(*f), wants(*fl)]);
                let mut out = Vec::new();
                out.extend(df.map(|d| (*f, d)));
                out.extend(dfl.map(|d| (*fl, d)));
                out
            }
            Op::SoftmaxLeading(a) => {
                let y = &node.value;
                let n = y.shape()[0];
                let plane = y.len() / n;
                let mut d = vec![0.0; y.len()];
                for p in 0..plane {
                    let dot: f64 = (0..n).map(|i| g.data()[i * plane + p] * y.data()[i * plane + p]).sum();
                    for i in 0..n {
                        let j = i * plane + p;
                        d[j] = y.data()[j] * (g.data()[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape(), d)?)]
            }
            Op::SpatialSoftmax(a, t) => {
                let y = &node.value;
                let n = y.shape()[0];
                let plane = y.len() / n;
                let mut d = vec![0.0; y.len()];
                for k in 0..n {
                    let r = k * plane..(k + 1) * plane;
                    let (yk, gk) = (&y.data()[r.clone()], &g.data()[r.clone()]);
                    let dot: f64 = yk.iter().zip(gk).map(|(y, g)| y * g).sum();
                    for (j, dj) in d[r].iter_mut().enumerate() {
                        *dj = yk[j] * (gk[j] - dot) / t;
                    }
                }
                vec![(*a, Tensor::new(y.shape(), d)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::MeanAbs(a) => {
                let av = val(*a);
                let s = g.item() / av.len() as f64;
                vec![(*a, av.map(|x| if x > 0.0 { s } else if x < 0.0 { -s } else { 0.0 }))]
            }
            Op::MeanSquare(a) => {
                let av = val(*a);
                let s = 2.0 * g.item() / av.len() as f64;
                vec![(*a, av.map(|x| s * x))]
            }
            Op::Custom(inputs, rule) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let ds = rule.backward(&ins, &node.value, g);
                inputs
                    .iter()
                    .zip(ds)
                    .filter_map(|(&v, d)| d.map(|d| (v, d)))
                    .collect()
            }
        };
        Ok(out)
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
