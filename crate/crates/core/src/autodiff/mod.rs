//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only list of nodes, so every node's operands
//! precede it and the node order is already topological. Shapes are inferred
//! while the graph is built; bindings are checked against declared input
//! shapes at evaluation time. Gradients are only propagated through nodes that
//! depend on a trainable input.

mod check;
pub(crate) mod kernels;
mod tensor;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

pub use check::{finite_difference_check, GradientCheck, ParameterCheck};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::image::LinearResampler;
use kernels::ConvGeometry;

/// Values bound to the named inputs of a graph.
pub type Bindings = HashMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Exponent of the elementwise power `|x|^p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Power {
    L1,
    L2,
}

impl Power {
    pub fn from_exponent(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Power::L1),
            2 => Ok(Power::L2),
            other => Err(Error::invalid(format!("norm exponent must be 1 or 2, got {other}"))),
        }
    }

    pub fn exponent(self) -> u32 {
        match self {
            Power::L1 => 1,
            Power::L2 => 2,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Power::L1 => x.abs(),
            Power::L2 => x * x,
        }
    }

    /// Derivative of `|x|^p`; the L1 subgradient at 0 is 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Power::L1 => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Power::L2 => 2.0 * x,
        }
    }
}

/// A user-supplied differentiable operation.
pub trait Primitive: Send + Sync {
    fn name(&self) -> &str;
    fn output_dims(&self, inputs: &[&[usize]]) -> Result<Vec<usize>>;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Vector-Jacobian product: one gradient per input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone)]
enum Op {
    Input { name: String, trainable: bool },
    Constant(Arc<Tensor>),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv2d { input: NodeId, kernel: NodeId },
    Upsample2x(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Pow(NodeId, Power),
    Resample(NodeId, Arc<LinearResampler>),
    ChannelAffine { x: NodeId, scale: NodeId, shift: NodeId },
    ChannelBias { x: NodeId, bias: NodeId },
    NoiseInject { x: NodeId, noise: NodeId, gain: NodeId },
    Cross(Vec<NodeId>),
    GeoCross(Vec<NodeId>),
    Custom(Vec<NodeId>, Arc<dyn Primitive>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(_) => "upsample2x",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Sum(_) => "sum",
            Op::Pow(..) => "pow",
            Op::Resample(..) => "resample",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::ChannelBias { .. } => "channel_bias",
            Op::NoiseInject { .. } => "noise_inject",
            Op::Cross(_) => "cross",
            Op::GeoCross(_) => "geocross",
            Op::Custom(_, p) => p.name(),
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => Vec::new(),
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { input, kernel } => vec![*input, *kernel],
            Op::Scale(a, _)
            | Op::Upsample2x(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Pow(a, _)
            | Op::Resample(a, _) => vec![*a],
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::ChannelBias { x, bias } => vec![*x, *bias],
            Op::NoiseInject { x, noise, gain } => vec![*x, *noise, *gain],
            Op::Cross(v) | Op::GeoCross(v) | Op::Custom(v, _) => v.clone(),
        }
    }
}

#[derive(Clone)]
struct Node {
    op: Op,
    dims: Vec<usize>,
}

/// Computation graph with an optional scalar output.
#[derive(Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    labels: HashMap<String, NodeId>,
    output: Option<NodeId>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("output", &self.output)
            .finish()
    }
}

fn plane_dims(dims: &[usize], context: &str) -> Result<(usize, usize, usize)> {
    match *dims {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(Error::invalid(format!("{context} expects a [C,H,W] or [H,W] tensor, got {dims:?}"))),
    }
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

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    fn push(&mut self, op: Op, dims: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, dims });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.dims.as_slice())
            .ok_or_else(|| Error::invalid(format!("node {} does not belong to this graph", id.0)))
    }

    fn same_dims(&self, a: NodeId, b: NodeId, context: &str) -> Result<Vec<usize>> {
        let (da, db) = (self.check(a)?, self.check(b)?);
        if da != db {
            return Err(Error::shape(context, da, db));
        }
        Ok(da.to_vec())
    }

    fn declare(&mut self, name: &str, dims: &[usize], trainable: bool) -> Result<NodeId> {
        let duplicate = self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Input { name: existing, .. } if existing == name));
        if duplicate {
            return Err(Error::invalid(format!("input `{name}` declared twice")));
        }
        Ok(self.push(
            Op::Input {
                name: name.to_string(),
                trainable,
            },
            dims.to_vec(),
        ))
    }

    /// Declares a non-trainable input.
    pub fn input(&mut self, name: &str, dims: &[usize]) -> Result<NodeId> {
        self.declare(name, dims, false)
    }

    /// Declares an input that gradients are reported for.
    pub fn trainable(&mut self, name: &str, dims: &[usize]) -> Result<NodeId> {
        self.declare(name, dims, true)
    }

    pub fn constant(&mut self, value: Arc<Tensor>) -> NodeId {
        let dims = value.dims().to_vec();
        self.push(Op::Constant(value), dims)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let dims = self.same_dims(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), dims))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let dims = self.same_dims(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), dims))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let dims = self.check(a)?.to_vec();
        Ok(self.push(Op::Scale(a, factor), dims))
    }

    /// `[m, n] × [n]` or `[m, n] × [n, p]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.check(a)?.to_vec(), self.check(b)?.to_vec());
        let dims = match (da.as_slice(), db.as_slice()) {
            ([m, n], [k]) if n == k => vec![*m],
            ([m, n], [k, p]) if n == k => vec![*m, *p],
            _ => return Err(Error::shape("matmul", &da, &db)),
        };
        Ok(self.push(Op::MatMul(a, b), dims))
    }

    /// Zero-padded same-size convolution of `[Cin, H, W]` by `[Cout, Cin, kh, kw]` (odd kh, kw).
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (di, dk) = (self.check(input)?.to_vec(), self.check(kernel)?.to_vec());
        match (di.as_slice(), dk.as_slice()) {
            ([c, h, w], [co, ci, kh, kw]) if c == ci && kh % 2 == 1 && kw % 2 == 1 => {
                let dims = vec![*co, *h, *w];
                Ok(self.push(Op::Conv2d { input, kernel }, dims))
            }
            _ => Err(Error::shape("conv2d", &di, &dk)),
        }
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        let (c, h, w) = plane_dims(&dims, "upsample2x")?;
        let out = if dims.len() == 3 {
            vec![c, 2 * h, 2 * w]
        } else {
            vec![2 * h, 2 * w]
        };
        Ok(self.push(Op::Upsample2x(x), out))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        Ok(self.push(Op::LeakyRelu(x, slope), dims))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        Ok(self.push(Op::Sigmoid(x), dims))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        Ok(self.push(Op::Tanh(x), dims))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::Sum(x), Vec::new()))
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check(x)?.iter().product::<usize>().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn pow(&mut self, x: NodeId, power: Power) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        Ok(self.push(Op::Pow(x, power), dims))
    }

    /// Applies a downscaler plane by plane; the backward pass is its adjoint.
    pub fn resample(&mut self, x: NodeId, resampler: Arc<LinearResampler>) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        let (c, h, w) = plane_dims(&dims, "resample")?;
        if (h, w) != resampler.hr_dims() {
            let (m, n) = resampler.hr_dims();
            return Err(Error::shape("resample", &[c, m, n], &dims));
        }
        let (m, n) = resampler.lr_dims();
        let out = if dims.len() == 3 { vec![c, m, n] } else { vec![m, n] };
        Ok(self.push(Op::Resample(x, resampler), out))
    }

    fn channel_vector(&self, v: NodeId, channels: usize, context: &str) -> Result<()> {
        let dv = self.check(v)?;
        if dv != [channels] {
            return Err(Error::shape(context, &[channels], dv));
        }
        Ok(())
    }

    /// `x[c] * scale[c] + shift[c]` over a `[C, H, W]` tensor.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        let (c, _, _) = plane_dims(&dims, "channel_affine")?;
        self.channel_vector(scale, c, "channel_affine scale")?;
        self.channel_vector(shift, c, "channel_affine shift")?;
        Ok(self.push(Op::ChannelAffine { x, scale, shift }, dims))
    }

    /// `x[c] + bias[c]` over a `[C, H, W]` tensor.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        let (c, _, _) = plane_dims(&dims, "channel_bias")?;
        self.channel_vector(bias, c, "channel_bias")?;
        Ok(self.push(Op::ChannelBias { x, bias }, dims))
    }

    /// `x[c] + gain[c] * noise` with a single `[H, W]` noise plane.
    pub fn noise_inject(&mut self, x: NodeId, noise: NodeId, gain: NodeId) -> Result<NodeId> {
        let dims = self.check(x)?.to_vec();
        let (c, h, w) = plane_dims(&dims, "noise_inject")?;
        let dn = self.check(noise)?;
        if dn != [h, w] {
            return Err(Error::shape("noise_inject noise", &[h, w], dn));
        }
        self.channel_vector(gain, c, "noise_inject gain")?;
        Ok(self.push(Op::NoiseInject { x, noise, gain }, dims))
    }

    fn vector_set(&self, vectors: &[NodeId], context: &str) -> Result<()> {
        let first = match vectors.first() {
            Some(&v) => self.check(v)?.to_vec(),
            None => return Err(Error::invalid(format!("{context} needs at least one vector"))),
        };
        if first.len() != 1 {
            return Err(Error::invalid(format!("{context} operands must be vectors, got {first:?}")));
        }
        for &v in &vectors[1..] {
            self.same_dims(vectors[0], v, context)?;
        }
        Ok(())
    }

    /// Sum over pairs `i < j` of squared Euclidean distances.
    pub fn cross(&mut self, vectors: &[NodeId]) -> Result<NodeId> {
        self.vector_set(vectors, "cross")?;
        Ok(self.push(Op::Cross(vectors.to_vec()), Vec::new()))
    }

    /// Sum over pairs `i < j` of squared angles.
    pub fn geocross(&mut self, vectors: &[NodeId]) -> Result<NodeId> {
        self.vector_set(vectors, "geocross")?;
        Ok(self.push(Op::GeoCross(vectors.to_vec()), Vec::new()))
    }

    pub fn custom(&mut self, inputs: &[NodeId], primitive: Arc<dyn Primitive>) -> Result<NodeId> {
        let dims: Vec<&[usize]> = inputs.iter().map(|&i| self.check(i)).collect::<Result<_>>()?;
        let out = primitive.output_dims(&dims)?;
        Ok(self.push(Op::Custom(inputs.to_vec(), primitive), out))
    }

    /// Attaches a lookup name to a node.
    pub fn label(&mut self, id: NodeId, name: &str) {
        self.labels.insert(name.to_string(), id);
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.labels.get(name).copied()
    }

    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        self.check(id)?;
        self.output = Some(id);
        Ok(())
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Declared inputs as `(name, dims, trainable)`.
    pub fn inputs(&self) -> impl Iterator<Item = (&str, &[usize], bool)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Input { name, trainable } => Some((name.as_str(), n.dims.as_slice(), *trainable)),
            _ => None,
        })
    }

    /// Runs the forward pass.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = self.forward_node(node, &values, bindings)?;
            if !value.all_finite() {
                return Err(Error::NonFinite(node.op.name().to_string()));
            }
            values.push(value);
        }
        Ok(Evaluation {
            values,
            labels: self.labels.clone(),
            output: self.output,
        })
    }

    fn forward_node(&self, node: &Node, values: &[Tensor], bindings: &Bindings) -> Result<Tensor> {
        let v = |id: &NodeId| &values[id.0];
        let map = |id: &NodeId, f: &dyn Fn(f64) -> f64| {
            let x = &values[id.0];
            Tensor::new(x.dims().to_vec(), x.data().iter().map(|&a| f(a)).collect())
        };
        let zip = |a: &NodeId, b: &NodeId, f: &dyn Fn(f64, f64) -> f64| {
            let (x, y) = (&values[a.0], &values[b.0]);
            Tensor::new(
                x.dims().to_vec(),
                x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
            )
        };
        match &node.op {
            Op::Input { name, .. } => {
                let bound = bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                if bound.dims() != node.dims.as_slice() {
                    return Err(Error::shape(format!("binding `{name}`"), &node.dims, bound.dims()));
                }
                Ok(bound.clone())
            }
            Op::Constant(t) => Ok((**t).clone()),
            Op::Add(a, b) => zip(a, b, &|p, q| p + q),
            Op::Mul(a, b) => zip(a, b, &|p, q| p * q),
            Op::Scale(a, s) => map(a, &|p| p * s),
            Op::MatMul(a, b) => {
                let (x, y) = (v(a), v(b));
                let (m, n) = (x.dims()[0], x.dims()[1]);
                let p = if y.dims().len() == 2 { y.dims()[1] } else { 1 };
                let mut out = vec![0.0; m * p];
                for i in 0..m {
                    let row = &x.data()[i * n..(i + 1) * n];
                    for (k, &aik) in row.iter().enumerate() {
                        let brow = &y.data()[k * p..(k + 1) * p];
                        for (o, &bkj) in out[i * p..(i + 1) * p].iter_mut().zip(brow) {
                            *o += aik * bkj;
                        }
                    }
                }
                Tensor::new(node.dims.clone(), out)
            }
            Op::Conv2d { input, kernel } => {
                let g = self.conv_geometry(*input, *kernel);
                Tensor::new(node.dims.clone(), kernels::conv2d(&g, v(input).data(), v(kernel).data()))
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = plane_dims(v(x).dims(), "upsample2x")?;
                Tensor::new(node.dims.clone(), kernels::upsample2x(v(x).data(), c, h, w))
            }
            Op::LeakyRelu(x, slope) => map(x, &|p| if p > 0.0 { p } else { slope * p }),
            Op::Sigmoid(x) => map(x, &|p| 1.0 / (1.0 + (-p).exp())),
            Op::Tanh(x) => map(x, &f64::tanh),
            Op::Sum(x) => Ok(Tensor::scalar(v(x).data().iter().sum())),
            Op::Pow(x, power) => map(x, &|p| power.apply(p)),
            Op::Resample(x, r) => {
                let (c, _, _) = plane_dims(v(x).dims(), "resample")?;
                Tensor::new(node.dims.clone(), r.apply_planes(c, v(x).data())?)
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (xs, s, t) = (v(x), v(scale).data(), v(shift).data());
                let plane = xs.len() / s.len();
                let data = xs
                    .data()
                    .chunks_exact(plane)
                    .zip(s.iter().zip(t))
                    .flat_map(|(p, (&a, &b))| p.iter().map(move |&q| q * a + b))
                    .collect();
                Tensor::new(node.dims.clone(), data)
            }
            Op::ChannelBias { x, bias } => {
                let (xs, b) = (v(x), v(bias).data());
                let plane = xs.len() / b.len();
                let data = xs
                    .data()
                    .chunks_exact(plane)
                    .zip(b)
                    .flat_map(|(p, &c)| p.iter().map(move |&q| q + c))
                    .collect();
                Tensor::new(node.dims.clone(), data)
            }
            Op::NoiseInject { x, noise, gain } => {
                let (xs, n, g) = (v(x), v(noise).data(), v(gain).data());
                let data = xs
                    .data()
                    .chunks_exact(n.len())
                    .zip(g)
                    .flat_map(|(p, &gc)| p.iter().zip(n).map(move |(&q, &e)| q + gc * e))
                    .collect();
                Tensor::new(node.dims.clone(), data)
            }
            Op::Cross(vs) => {
                let mut total = 0.0;
                for (i, a) in vs.iter().enumerate() {
                    for b in &vs[i + 1..] {
                        total += v(a)
                            .data()
                            .iter()
                            .zip(v(b).data())
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum::<f64>();
                    }
                }
                Ok(Tensor::scalar(total))
            }
            Op::GeoCross(vs) => {
                if vs.iter().any(|a| v(a).norm() == 0.0) {
                    return Err(Error::ZeroVector);
                }
                let mut total = 0.0;
                for (i, a) in vs.iter().enumerate() {
                    for b in &vs[i + 1..] {
                        let theta = kernels::angle(v(a).data(), v(b).data());
                        total += theta * theta;
                    }
                }
                Ok(Tensor::scalar(total))
            }
            Op::Custom(inputs, p) => {
                let args: Vec<&Tensor> = inputs.iter().map(v).collect();
                let out = p.forward(&args)?;
                if out.dims() != node.dims.as_slice() {
                    return Err(Error::shape(p.name(), &node.dims, out.dims()));
                }
                Ok(out)
            }
        }
    }

    fn conv_geometry(&self, input: NodeId, kernel: NodeId) -> ConvGeometry {
        let (di, dk) = (self.dims(input), self.dims(kernel));
        ConvGeometry {
            c_in: di[0],
            c_out: dk[0],
            height: di[1],
            width: di[2],
            kh: dk[2],
            kw: dk[3],
        }
    }

    /// Forward pass followed by reverse-mode accumulation from the scalar
    /// output to every trainable input.
    pub fn gradient(&self, bindings: &Bindings) -> Result<GradientRun> {
        let output = self.output.ok_or(Error::NoOutput)?;
        if !self.nodes[output.0].dims.iter().all(|&d| d == 1) {
            return Err(Error::NotScalar(self.nodes[output.0].dims.clone()));
        }
        let evaluation = self.evaluate(bindings)?;
        let values = &evaluation.values;

        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Input { trainable, .. } => *trainable,
                op => op.operands().iter().any(|o| needs[o.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(&self.nodes[output.0].dims, 1.0));
        for i in (0..=output.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Input { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            let operands = node.op.operands();
            let local = self.backward_node(node, values, &values[i], &g, &needs)?;
            for (id, contribution) in operands.iter().zip(local) {
                let Some(contribution) = contribution else { continue };
                if !needs[id.0] {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }

        let mut by_name = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input { name, trainable: true } = &node.op {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(&node.dims));
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
                by_name.insert(name.clone(), g);
            }
        }
        Ok(GradientRun {
            evaluation,
            output,
            grads: by_name,
        })
    }

    /// Local vector-Jacobian products, one per operand (None when the operand
    /// does not need a gradient).
    fn backward_node(
        &self,
        node: &Node,
        values: &[Tensor],
        out: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let v = |id: &NodeId| &values[id.0];
        let want = |id: &NodeId| needs[id.0];
        let elementwise = |x: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            Tensor::new(x.dims().to_vec(), data)
        };
        Ok(match &node.op {
            Op::Input { .. } | Op::Constant(_) => Vec::new(),
            Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul(a, b) => {
                let (x, y) = (v(a), v(b));
                vec![
                    want(a).then(|| elementwise(x, &|i, gi| gi * y.data()[i])).transpose()?,
                    want(b).then(|| elementwise(y, &|i, gi| gi * x.data()[i])).transpose()?,
                ]
            }
            Op::Scale(a, s) => vec![Some(elementwise(v(a), &|_, gi| gi * s)?)],
            Op::MatMul(a, b) => {
                let (x, y) = (v(a), v(b));
                let (m, n) = (x.dims()[0], x.dims()[1]);
                let p = if y.dims().len() == 2 { y.dims()[1] } else { 1 };
                let ga = want(a).then(|| {
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for k in 0..n {
                            d[i * n + k] = (0..p).map(|j| g.data()[i * p + j] * y.data()[k * p + j]).sum();
                        }
                    }
                    Tensor::new(x.dims().to_vec(), d)
                });
                let gb = want(b).then(|| {
                    let mut d = vec![0.0; n * p];
                    for i in 0..m {
                        let gi = &g.data()[i * p..(i + 1) * p];
                        for k in 0..n {
                            let aik = x.data()[i * n + k];
                            for (o, &gv) in d[k * p..(k + 1) * p].iter_mut().zip(gi) {
                                *o += aik * gv;
                            }
                        }
                    }
                    Tensor::new(y.dims().to_vec(), d)
                });
                vec![ga.transpose()?, gb.transpose()?]
            }
            Op::Conv2d { input, kernel } => {
                let geo = self.conv_geometry(*input, *kernel);
                let gi = want(input)
                    .then(|| {
                        Tensor::new(
                            v(input).dims().to_vec(),
                            kernels::conv2d_grad_input(&geo, g.data(), v(kernel).data()),
                        )
                    })
                    .transpose()?;
                let gk = want(kernel)
                    .then(|| {
                        Tensor::new(
                            v(kernel).dims().to_vec(),
                            kernels::conv2d_grad_kernel(&geo, g.data(), v(input).data()),
                        )
                    })
                    .transpose()?;
                vec![gi, gk]
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = plane_dims(v(x).dims(), "upsample2x")?;
                vec![Some(Tensor::new(
                    v(x).dims().to_vec(),
                    kernels::upsample2x_adjoint(g.data(), c, h, w),
                )?)]
            }
            Op::LeakyRelu(x, slope) => {
                let xs = v(x);
                vec![Some(elementwise(xs, &|i, gi| {
                    if xs.data()[i] > 0.0 {
                        gi
                    } else {
                        gi * slope
                    }
                })?)]
            }
            Op::Sigmoid(x) => vec![Some(elementwise(v(x), &|i, gi| {
                let y = out.data()[i];
                gi * y * (1.0 - y)
            })?)],
            Op::Tanh(x) => vec![Some(elementwise(v(x), &|i, gi| {
                let y = out.data()[i];
                gi * (1.0 - y * y)
            })?)],
            Op::Sum(x) => vec![Some(Tensor::full(v(x).dims(), g.data()[0]))],
            Op::Pow(x, power) => {
                let xs = v(x);
                vec![Some(elementwise(xs, &|i, gi| gi * power.derivative(xs.data()[i]))?)]
            }
            Op::Resample(x, r) => {
                let (c, _, _) = plane_dims(v(x).dims(), "resample")?;
                vec![Some(Tensor::new(v(x).dims().to_vec(), r.adjoint_planes(c, g.data())?)?)]
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (xs, s) = (v(x), v(scale).data());
                let plane = xs.len() / s.len();
                let gx = want(x)
                    .then(|| elementwise(xs, &|i, gi| gi * s[i / plane]))
                    .transpose()?;
                let gs = want(scale).then(|| {
                    Tensor::vector(
                        g.data()
                            .chunks_exact(plane)
                            .zip(xs.data().chunks_exact(plane))
                            .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                            .collect(),
                    )
                });
                let gt = want(shift).then(|| {
                    Tensor::vector(g.data().chunks_exact(plane).map(|gp| gp.iter().sum()).collect())
                });
                vec![gx, gs, gt]
            }
            Op::ChannelBias { x, bias } => {
                let plane = v(x).len() / v(bias).len();
                let gb = want(bias).then(|| {
                    Tensor::vector(g.data().chunks_exact(plane).map(|gp| gp.iter().sum()).collect())
                });
                vec![Some(g.clone()), gb]
            }
            Op::NoiseInject { x, noise, gain } => {
                let (n, gains) = (v(noise).data(), v(gain).data());
                let plane = n.len();
                let gn = want(noise).then(|| {
                    let mut d = vec![0.0; plane];
                    for (gp, &gc) in g.data().chunks_exact(plane).zip(gains) {
                        for (o, &gv) in d.iter_mut().zip(gp) {
                            *o += gc * gv;
                        }
                    }
                    Tensor::new(v(noise).dims().to_vec(), d)
                });
                let gg = want(gain).then(|| {
                    Tensor::vector(
                        g.data()
                            .chunks_exact(plane)
                            .map(|gp| gp.iter().zip(n).map(|(a, b)| a * b).sum())
                            .collect(),
                    )
                });
                let _ = x;
                vec![Some(g.clone()), gn.transpose()?, gg]
            }
            Op::Cross(vs) => {
                let seed = g.data()[0];
                let d = v(&vs[0]).len();
                let k = vs.len() as f64;
                let mut total = vec![0.0; d];
                for a in vs {
                    for (t, &x) in total.iter_mut().zip(v(a).data()) {
                        *t += x;
                    }
                }
                vs.iter()
                    .map(|a| {
                        let data = v(a)
                            .data()
                            .iter()
                            .zip(&total)
                            .map(|(&x, &t)| seed * 2.0 * (k * x - t))
                            .collect();
                        Some(Tensor::vector(data))
                    })
                    .collect()
            }
            Op::GeoCross(vs) => {
                let seed = g.data()[0];
                let d = v(&vs[0]).len();
                let mut acc = vec![vec![0.0; d]; vs.len()];
                for i in 0..vs.len() {
                    for j in i + 1..vs.len() {
                        let (a, b) = (v(&vs[i]).data(), v(&vs[j]).data());
                        let theta = kernels::angle(a, b);
                        geocross_pair_grad(a, b, theta, seed, &mut acc[i]);
                        geocross_pair_grad(b, a, theta, seed, &mut acc[j]);
                    }
                }
                acc.into_iter().map(|a| Some(Tensor::vector(a))).collect()
            }
            Op::Custom(inputs, p) => {
                let args: Vec<&Tensor> = inputs.iter().map(v).collect();
                let local = p.backward(&args, out, g)?;
                if local.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "primitive `{}` returned {} gradients for {} inputs",
                        p.name(),
                        local.len(),
                        inputs.len()
                    )));
                }
                local.into_iter().map(Some).collect()
            }
        })
    }
}

/// Accumulates `seed * d(theta²)/d(from)` into `acc`. The derivative of the
/// angle moves `from` away from `to` along the tangent direction at `from`;
/// it is taken as zero when that direction is undefined (parallel vectors).
fn geocross_pair_grad(from: &[f64], to: &[f64], theta: f64, seed: f64, acc: &mut [f64]) {
    let nf = kernels::norm(from);
    let proj = kernels::dot(from, to) / (nf * nf);
    let rejection: Vec<f64> = from.iter().zip(to).map(|(f, t)| t - proj * f).collect();
    let rn = kernels::norm(&rejection);
    if rn == 0.0 || theta == 0.0 {
        return;
    }
    let coeff = -seed * 2.0 * theta / (nf * rn);
    for (a, r) in acc.iter_mut().zip(&rejection) {
        *a += coeff * r;
    }
}

/// Forward values of every node.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    labels: HashMap<String, NodeId>,
    output: Option<NodeId>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn labeled(&self, name: &str) -> Option<&Tensor> {
        self.labels.get(name).map(|id| &self.values[id.0])
    }

    pub fn output(&self) -> Option<&Tensor> {
        self.output.map(|id| &self.values[id.0])
    }
}

/// Result of [`Graph::gradient`]: forward values plus gradients keyed by input name.
#[derive(Clone, Debug)]
pub struct GradientRun {
    pub evaluation: Evaluation,
    output: NodeId,
    pub grads: HashMap<String, Tensor>,
}

impl GradientRun {
    pub fn loss(&self) -> f64 {
        self.evaluation.value(self.output).data()[0]
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }
}
