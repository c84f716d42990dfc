use super::conv::{self, ConvGeometry};
use super::{Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operators available through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Neg,
    Relu,
    Sigmoid,
    Log,
    Exp,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Neg => "neg",
            Elementwise::Relu => "relu",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Log => "log",
            Elementwise::Exp => "exp",
        }
    }
}

/// Backward rule for an operator implemented outside this module.
///
/// Returns one entry per input, `None` where no gradient flows.
pub trait CustomBackward: Send {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Unary(Elementwise, usize),
    Binary(Elementwise, usize, usize),
    Max(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Conv {
        input: usize,
        weight: usize,
        bias: usize,
        geo: ConvGeometry,
    },
    Concat(usize, usize),
    SliceChannels {
        src: usize,
        start: usize,
    },
    SliceFlat {
        src: usize,
        start: usize,
    },
    Reshape(usize),
    Gather {
        src: usize,
        y: usize,
        x: usize,
    },
    Custom {
        inputs: Vec<usize>,
        backward: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Tape of executed operations supporting one reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Leaf that gradients are accumulated into.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` if nothing flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var, TensorError> {
        match (op.is_binary(), b) {
            (true, Some(b)) => {
                self.same_shape(op.name(), a, b)?;
                let (x, y) = (self.value(a).data(), self.value(b).data());
                let data: Vec<f64> = match op {
                    Elementwise::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
                    Elementwise::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
                    Elementwise::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
                    _ => unreachable!(),
                };
                let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
                let rg = self.rg(a.0) || self.rg(b.0);
                Ok(self.push(value, rg, Op::Binary(op, a.0, b.0)))
            }
            (false, None) => {
                let x = self.value(a);
                if op == Elementwise::Log {
                    if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                        return Err(TensorError::LogDomain { index, value });
                    }
                }
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .map(|&v| match op {
                        Elementwise::Neg => -v,
                        Elementwise::Relu => v.max(0.0),
                        Elementwise::Sigmoid => sigmoid(v),
                        Elementwise::Log => v.ln(),
                        Elementwise::Exp => v.exp(),
                        _ => unreachable!(),
                    })
                    .collect();
                let value = Tensor::new(x.shape().to_vec(), data)?;
                let rg = self.rg(a.0);
                Ok(self.push(value, rg, Op::Unary(op, a.0)))
            }
            _ => Err(TensorError::Arity { op: op.name() }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Neg, a, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Relu, a, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Sigmoid, a, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Log, a, None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.elementwise(Elementwise::Exp, a, None)
    }

    /// Elementwise sum of two equally shaped maps.
    pub fn channel_sum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.add(a, b)
    }

    /// Elementwise maximum. On ties the gradient goes to `a`.
    pub fn channel_max(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("channel_max", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data = x.iter().zip(y).map(|(p, q)| if p >= q { *p } else { *q }).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, rg, Op::Max(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        let rg = self.rg(a.0);
        Ok(self.push(value, rg, Op::Scale(a.0, factor)))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a.0);
        Ok(self.push(value, rg, Op::Sum(a.0)))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let geo = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
            stride,
            padding,
        )?;
        let out = conv::forward(&geo, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let value = Tensor::new(geo.output_shape().to_vec(), out)?;
        let rg = self.rg(input.0) || self.rg(weight.0) || self.rg(bias.0);
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                geo,
            },
        ))
    }

    /// Stacks `b`'s channels after `a`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: vec![ca, ha, wa],
                right: vec![cb, hb, wb],
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, rg, Op::Concat(a.0, b.0)))
    }

    /// Channels `start..start + count` of a CxHxW map.
    pub fn slice_channels(&mut self, a: Var, start: usize, count: usize) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(a).chw()?;
        if start + count > c || count == 0 {
            return Err(TensorError::Range {
                start,
                len: count,
                extent: c,
            });
        }
        let plane = h * w;
        let data = self.value(a).data()[start * plane..(start + count) * plane].to_vec();
        let value = Tensor::new(vec![count, h, w], data)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, rg, Op::SliceChannels { src: a.0, start }))
    }

    /// Contiguous range of the flattened data as a rank-1 tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let n = self.value(a).numel();
        if start + len > n || len == 0 {
            return Err(TensorError::Range { start, len, extent: n });
        }
        let value = Tensor::new(vec![len], self.value(a).data()[start..start + len].to_vec())?;
        let rg = self.rg(a.0);
        Ok(self.push(value, rg, Op::SliceFlat { src: a.0, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, rg, Op::Reshape(a.0)))
    }

    /// The channel vector at spatial location `(y, x)` of a CxHxW map.
    pub fn gather_location(&mut self, a: Var, y: usize, x: usize) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(a).chw()?;
        if y >= h || x >= w {
            return Err(TensorError::Range {
                start: y * w + x,
                len: 1,
                extent: h * w,
            });
        }
        let src = self.value(a);
        let data = (0..c).map(|ch| src.at3(ch, y, x)).collect();
        let value = Tensor::new(vec![c], data)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, rg, Op::Gather { src: a.0, y, x }))
    }

    /// Records an operator whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: Box<dyn CustomBackward>) -> Var {
        let rg = inputs.iter().any(|v| self.rg(v.0));
        self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                backward,
            },
        )
    }

    /// Reverse sweep from a one-element `loss`. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let n = self.nodes[idx].value.numel();
        let buf = self.grads[idx].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // `before` holds every node an operator may read.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let out = node.value.data();
        let mut pending: Vec<(usize, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = before[*a].value.data();
                let d: Vec<f64> = match op {
                    Elementwise::Neg => g.iter().map(|v| -v).collect(),
                    Elementwise::Relu => g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    Elementwise::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Elementwise::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Elementwise::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    _ => unreachable!(),
                };
                pending.push((*a, d));
            }
            Op::Binary(op, a, b) => {
                let (x, y) = (before[*a].value.data(), before[*b].value.data());
                match op {
                    Elementwise::Add => {
                        pending.push((*a, g.to_vec()));
                        pending.push((*b, g.to_vec()));
                    }
                    Elementwise::Sub => {
                        pending.push((*a, g.to_vec()));
                        pending.push((*b, g.iter().map(|v| -v).collect()));
                    }
                    Elementwise::Mul => {
                        pending.push((*a, g.iter().zip(y).map(|(g, y)| g * y).collect()));
                        pending.push((*b, g.iter().zip(x).map(|(g, x)| g * x).collect()));
                    }
                    _ => unreachable!(),
                }
            }
            Op::Max(a, b) => {
                let (x, y) = (before[*a].value.data(), before[*b].value.data());
                let first = x.iter().zip(y).zip(g).map(|((p, q), g)| if p >= q { *g } else { 0.0 }).collect();
                let second = x.iter().zip(y).zip(g).map(|((p, q), g)| if p >= q { 0.0 } else { *g }).collect();
                pending.push((*a, first));
                pending.push((*b, second));
            }
            Op::Scale(a, f) => pending.push((*a, g.iter().map(|v| v * f).collect())),
            Op::Sum(a) => pending.push((*a, vec![g[0]; before[*a].value.numel()])),
            Op::Conv { input, weight, bias, geo } => {
                let (xin, w) = (before[*input].value.data(), before[*weight].value.data());
                let mut gi = before[*input].requires_grad.then(|| vec![0.0; xin.len()]);
                let mut gw = before[*weight].requires_grad.then(|| vec![0.0; w.len()]);
                if gi.is_some() || gw.is_some() {
                    conv::backward(geo, xin, w, g, gi.as_deref_mut(), gw.as_deref_mut());
                }
                if let Some(gi) = gi {
                    pending.push((*input, gi));
                }
                if let Some(gw) = gw {
                    pending.push((*weight, gw));
                }
                if before[*bias].requires_grad {
                    pending.push((*bias, conv::bias_grad(geo, g)));
                }
            }
            Op::Concat(a, b) => {
                let na = before[*a].value.numel();
                pending.push((*a, g[..na].to_vec()));
                pending.push((*b, g[na..].to_vec()));
            }
            Op::SliceChannels { src, start } => {
                let shape = before[*src].value.shape();
                let plane = shape[1] * shape[2];
                let mut d = vec![0.0; before[*src].value.numel()];
                d[start * plane..start * plane + g.len()].copy_from_slice(g);
                pending.push((*src, d));
            }
            Op::SliceFlat { src, start } => {
                let mut d = vec![0.0; before[*src].value.numel()];
                d[*start..start + g.len()].copy_from_slice(g);
                pending.push((*src, d));
            }
            Op::Reshape(a) => pending.push((*a, g.to_vec())),
            Op::Gather { src, y, x } => {
                let shape = before[*src].value.shape();
                let (h, w) = (shape[1], shape[2]);
                let mut d = vec![0.0; before[*src].value.numel()];
                for (c, gv) in g.iter().enumerate() {
                    d[(c * h + y) * w + x] = *gv;
                }
                pending.push((*src, d));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&k| &before[k].value).collect();
                let grads = backward.backward(&values, &node.value, g);
                for (&k, d) in inputs.iter().zip(grads) {
                    if let Some(d) = d {
                        debug_assert_eq!(d.len(), before[k].value.numel());
                        pending.push((k, d));
                    }
                }
            }
        }
        for (k, d) in pending {
            self.accumulate(k, |buf| {
                for (b, v) in buf.iter_mut().zip(&d) {
                    *b += v;
                }
            });
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
