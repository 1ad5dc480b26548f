use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    /// Per-element multiplier: 0 for dropped elements, `1/(1-rate)` for survivors.
    Dropout {
        input: Var,
        scale: Vec<f64>,
    },
    Concat(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mul(Var, Var),
    Mean(Vec<Var>),
    BceWithLogits {
        logit: Var,
        label: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the grad-enabled leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`; zero when the loss does not reach it.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.sizes[var.0]],
        }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Grad-enabled leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Cross-correlation of a `[C_in,H,W]` input with `[C_out,C_in,k,k]`
    /// kernels plus a per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        let b = self.value(bias);
        if b.len() != geometry.out_channels {
            return Err(Error::dim(
                "conv2d",
                format!("bias {:?} does not match {} output channels", b.shape(), geometry.out_channels),
            ));
        }
        let shape = geometry.output_shape();
        let mut out = vec![0.0; shape.iter().product()];
        kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            b.data(),
            &mut out,
        );
        let value = Tensor::new(shape.to_vec(), out)?;
        self.record(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            &[input, kernel, bias],
        )
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = self.value(input);
        let (shape, out, argmax) = kernels::max_pool2d_forward(x.shape(), window, x.data())?;
        let value = Tensor::new(shape.to_vec(), out)?;
        self.record("max_pool2d", value, Op::MaxPool2d { input, argmax }, &[input])
    }

    /// `weight · input + bias` for a `[n]` input and `[m,n]` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let ok = x.shape().len() == 1
            && w.shape().len() == 2
            && w.shape()[1] == x.len()
            && b.shape() == [w.shape()[0]];
        if !ok {
            return Err(Error::dim(
                "linear",
                format!(
                    "input {:?}, weight {:?} and bias {:?} do not agree",
                    x.shape(),
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        let mut out = vec![0.0; w.shape()[0]];
        kernels::linear_forward(x.data(), w.data(), b.data(), &mut out);
        self.record("linear", Tensor::from_vec(out), Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.record("relu", value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.record("sigmoid", value, Op::Sigmoid(input), &[input])
    }

    /// Inverted dropout. Identity (no node recorded) in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let scale: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.record("dropout", value, Op::Dropout { input, scale }, &[input])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != y.shape().len() || x.shape()[1..] != y.shape()[1..] {
            return Err(Error::dim(
                "concat",
                format!("cannot concatenate {:?} and {:?} along axis 0", x.shape(), y.shape()),
            ));
        }
        let mut shape = x.shape().to_vec();
        shape[0] += y.shape()[0];
        let mut out = Vec::with_capacity(x.len() + y.len());
        out.extend_from_slice(x.data());
        out.extend_from_slice(y.data());
        let value = Tensor::new(shape, out)?;
        self.record("concat", value, Op::Concat(a, b), &[a, b])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        self.record("reshape", value, Op::Reshape(input), &[input])
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        self.reshape(input, &[n])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum();
        self.record("sum", Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.record("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Mean of one-element tensors.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("mean of zero values".into()));
        }
        let mut total = 0.0;
        for &v in inputs {
            total += self
                .value(v)
                .item()
                .ok_or_else(|| Error::dim("mean", format!("operand {:?} is not a scalar", self.value(v).shape())))?;
        }
        let value = Tensor::scalar(total / inputs.len() as f64);
        self.record("mean", value, Op::Mean(inputs.to_vec()), inputs)
    }

    /// Binary cross-entropy on a single logit, in the stable softplus form.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Result<Var> {
        let z = self
            .value(logit)
            .item()
            .ok_or_else(|| Error::dim("bce_with_logits", format!("logit shape {:?}", self.value(logit).shape())))?;
        if !z.is_finite() {
            return Err(Error::NonFinite { op: "bce_with_logits" });
        }
        let loss = label * kernels::softplus(-z) + (1.0 - label) * kernels::softplus(z);
        self.record(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits { logit, label },
            &[logit],
        )
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let sizes = self.nodes.iter().map(|n| n.value.len()).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, sizes })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*kernel).data();
                let mut d_input = self.accumulate(grads, *input).map(std::mem::take);
                let mut d_kernel = self.accumulate(grads, *kernel).map(std::mem::take);
                let mut d_bias = self.accumulate(grads, *bias).map(std::mem::take);
                kernels::conv2d_backward(
                    geometry,
                    x,
                    w,
                    g,
                    d_input.as_deref_mut(),
                    d_kernel.as_deref_mut(),
                    d_bias.as_deref_mut(),
                );
                for (var, buf) in [(input, d_input), (kernel, d_kernel), (bias, d_bias)] {
                    if let Some(buf) = buf {
                        grads[var.0] = Some(buf);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(d) = self.accumulate(grads, *input) {
                    for (&idx, &go) in argmax.iter().zip(g) {
                        d[idx] += go;
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input).data();
                let n = x.len();
                if let Some(dw) = self.accumulate(grads, *weight) {
                    for (row, &go) in dw.chunks_exact_mut(n).zip(g) {
                        for (d, &xv) in row.iter_mut().zip(x) {
                            *d += go * xv;
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, *bias) {
                    for (d, &go) in db.iter_mut().zip(g) {
                        *d += go;
                    }
                }
                let w = self.value(*weight).data();
                if let Some(dx) = self.accumulate(grads, *input) {
                    for (row, &go) in w.chunks_exact(n).zip(g) {
                        for (d, &wv) in dx.iter_mut().zip(row) {
                            *d += go * wv;
                        }
                    }
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                if let Some(d) = self.accumulate(grads, *input) {
                    for ((d, &go), &xv) in d.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += go;
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                if let Some(d) = self.accumulate(grads, *input) {
                    for ((d, &go), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d += go * yv * (1.0 - yv);
                    }
                }
            }
            Op::Dropout { input, scale } => {
                if let Some(d) = self.accumulate(grads, *input) {
                    for ((d, &go), &s) in d.iter_mut().zip(g).zip(scale) {
                        *d += go * s;
                    }
                }
            }
            Op::Concat(a, b) => {
                let split = self.value(*a).len();
                if let Some(d) = self.accumulate(grads, *a) {
                    for (d, &go) in d.iter_mut().zip(&g[..split]) {
                        *d += go;
                    }
                }
                if let Some(d) = self.accumulate(grads, *b) {
                    for (d, &go) in d.iter_mut().zip(&g[split..]) {
                        *d += go;
                    }
                }
            }
            Op::Reshape(input) => {
                if let Some(d) = self.accumulate(grads, *input) {
                    for (d, &go) in d.iter_mut().zip(g) {
                        *d += go;
                    }
                }
            }
            Op::Sum(input) => {
                if let Some(d) = self.accumulate(grads, *input) {
                    for d in d.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.accumulate(grads, *a) {
                    for ((d, &go), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d += go * yv;
                    }
                }
                if let Some(d) = self.accumulate(grads, *b) {
                    for ((d, &go), &xv) in d.iter_mut().zip(g).zip(x) {
                        *d += go * xv;
                    }
                }
            }
            Op::Mean(inputs) => {
                let share = g[0] / inputs.len() as f64;
                for v in inputs {
                    if let Some(d) = self.accumulate(grads, *v) {
                        d[0] += share;
                    }
                }
            }
            Op::BceWithLogits { logit, label } => {
                let z = self.value(*logit).data()[0];
                if let Some(d) = self.accumulate(grads, *logit) {
                    d[0] += g[0] * (kernels::sigmoid(z) - label);
                }
            }
        }
    }
}
