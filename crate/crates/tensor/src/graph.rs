//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in execution order. Each node owns its
//! forward value plus whatever the adjoint needs; [`Graph::backward`] walks
//! the tape once in reverse and returns gradients for every leaf created with
//! [`Graph::param`].

use crate::conv::{self, ConvProblem, Padding};
use crate::error::{Result, TensorError};
use crate::nn::{self, DropoutMode, NormMode};
use crate::tensor::{same_shape, split_at_axis, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of an operation defined outside this crate.
pub trait CustomBackward: Send + Sync {
    /// Gradient contribution for each input, in input order (`None` if the
    /// input receives no gradient).
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Stack {
        inputs: Vec<Var>,
        axis: usize,
    },
    Select {
        input: Var,
        axis: usize,
        index: usize,
    },
    Reshape(Var),
    Conv {
        input: Var,
        kernel: Var,
        problem: ConvProblem,
    },
    ConvTranspose {
        input: Var,
        kernel: Var,
        problem: ConvProblem,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the graph's parameters.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(true), Op::Leaf, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(name, self.shape(a), self.shape(b))?;
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(nn::sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = nn::softmax(self.value(a), axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Softmax { input: a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Adds a per-channel bias (`[C]`) along axis 1 of `[B, C, ..]`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(TensorError::invalid("bias_add", "input needs a channel axis"));
        }
        let (outer, ch, inner) = split_at_axis(x.shape(), 1);
        let b = self.value(bias);
        if b.len() != ch {
            return Err(TensorError::mismatch("bias_add", "channels", ch, b.len()));
        }
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let bc = b.data()[c];
                for v in &mut data[(o * ch + c) * inner..(o * ch + c + 1) * inner] {
                    *v += bc;
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[input, bias]);
        Ok(self.push(v, Op::BiasAdd { input, bias }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = nn::concat(&refs, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = nn::slice_axis(self.value(input), axis, start, len)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Slice { input, axis, start }, rg))
    }

    /// Stacks equally-shaped tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::invalid("stack", "no inputs"))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(TensorError::invalid("stack", format!("axis {axis} out of range")));
        }
        for &v in &inputs[1..] {
            same_shape("stack", &shape, self.shape(v))?;
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * inputs.len() * inner);
        for o in 0..outer {
            for &v in inputs {
                data.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, inputs.len());
        let v = Tensor::new(out_shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            v,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Picks index `index` along `axis`, removing that axis.
    pub fn select(&mut self, input: Var, axis: usize, index: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() || x.rank() < 2 {
            return Err(TensorError::invalid(
                "select",
                format!("axis {axis} invalid for shape {:?}", x.shape()),
            ));
        }
        let (outer, n, inner) = split_at_axis(x.shape(), axis);
        if index >= n {
            return Err(TensorError::invalid("select", format!("index {index} out of range for extent {n}")));
        }
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * n + index) * inner..(o * n + index + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Select { input, axis, index }, rg))
    }

    pub fn unstack(&mut self, input: Var, axis: usize) -> Result<Vec<Var>> {
        let n = self
            .shape(input)
            .get(axis)
            .copied()
            .ok_or_else(|| TensorError::invalid("unstack", format!("axis {axis} out of range")))?;
        (0..n).map(|i| self.select(input, axis, i)).collect()
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(input).reshape(shape)?.with_requires_grad(false);
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Reshape(input), rg))
    }

    pub fn conv(&mut self, input: Var, kernel: Var, stride: &[usize], padding: Padding, rank: usize) -> Result<Var> {
        let problem = ConvProblem::forward(self.shape(input), self.shape(kernel), stride, padding, rank)?;
        let y = conv::forward_raw(
            &problem.geom,
            problem.batch,
            problem.cin,
            problem.cout,
            self.value(input).data(),
            self.value(kernel).data(),
        );
        let v = Tensor::new(problem.forward_shape(), y)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(v, Op::Conv { input, kernel, problem }, rg))
    }

    pub fn conv_transpose(&mut self, input: Var, kernel: Var, stride: &[usize], padding: Padding, rank: usize) -> Result<Var> {
        let problem = ConvProblem::transpose(self.shape(input), self.shape(kernel), stride, padding, rank)?;
        let x = conv::backward_input_raw(
            &problem.geom,
            problem.batch,
            problem.cin,
            problem.cout,
            self.value(input).data(),
            self.value(kernel).data(),
        );
        let v = Tensor::new(problem.input_shape(), x)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(v, Op::ConvTranspose { input, kernel, problem }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (v, argmax) = nn::maxpool2d_with_argmax(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::MaxPool { input, argmax }, rg))
    }

    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, mode: NormMode<'_>, eps: f64) -> Result<Var> {
        let train = mode.is_train();
        let out = nn::batchnorm_core(self.value(input), self.value(gamma), self.value(beta), mode, eps)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            out.out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn dropout(&mut self, input: Var, rate: f64, mode: DropoutMode) -> Result<Var> {
        let x = self.value(input);
        match nn::dropout_mask(x.len(), rate, mode)? {
            None => Ok(input),
            Some(mask) => {
                let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                let v = Tensor::new(x.shape().to_vec(), data)?;
                let rg = self.rg(&[input]);
                Ok(self.push(v, Op::Dropout { input, mask }, rg))
            }
        }
    }

    /// Records an externally computed value whose adjoint is `backward`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: Box<dyn CustomBackward>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output.with_requires_grad(false),
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    ///
    /// Operations are visited exactly once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        pending[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut pending[v.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(&contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|x| -x).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
                Op::AddScalar(a) => acc(*a, g),
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect());
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    acc(*a, g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect());
                }
                Op::Softmax { input, axis } => {
                    let y = node.value.data();
                    let (outer, c, inner) = split_at_axis(node.value.shape(), *axis);
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| (o * c + j) * inner + k;
                            let dot: f64 = (0..c).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..c {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    acc(*input, gx);
                }
                Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
                Op::Mean(a) => {
                    let len = self.value(*a).len();
                    acc(*a, vec![g[0] / len as f64; len]);
                }
                Op::BiasAdd { input, bias } => {
                    let (outer, ch, inner) = split_at_axis(node.value.shape(), 1);
                    let mut gb = vec![0.0; ch];
                    for o in 0..outer {
                        for (c, gbc) in gb.iter_mut().enumerate() {
                            *gbc += g[(o * ch + c) * inner..(o * ch + c + 1) * inner].iter().sum::<f64>();
                        }
                    }
                    acc(*bias, gb);
                    acc(*input, g);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &v in inputs {
                        let n = self.shape(v)[*axis];
                        let mut part = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&g[start..start + n * inner]);
                        }
                        offset += n;
                        acc(v, part);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let (outer, n, inner) = split_at_axis(self.shape(*input), *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(*input, gx);
                }
                Op::Stack { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let k = inputs.len();
                    for (j, &v) in inputs.iter().enumerate() {
                        let mut part = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            part.extend_from_slice(&g[(o * k + j) * inner..(o * k + j + 1) * inner]);
                        }
                        acc(v, part);
                    }
                }
                Op::Select { input, axis, index } => {
                    let (outer, n, inner) = split_at_axis(self.shape(*input), *axis);
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let dst = (o * n + index) * inner;
                        gx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                    acc(*input, gx);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Conv { input, kernel, problem } => {
                    let p = problem;
                    if self.nodes[kernel.0].requires_grad {
                        let dw = conv::backward_kernel_raw(&p.geom, p.batch, p.cin, p.cout, self.value(*input).data(), &g);
                        acc(*kernel, dw);
                    }
                    if self.nodes[input.0].requires_grad {
                        let dx = conv::backward_input_raw(&p.geom, p.batch, p.cin, p.cout, &g, self.value(*kernel).data());
                        acc(*input, dx);
                    }
                }
                Op::ConvTranspose { input, kernel, problem } => {
                    let p = problem;
                    if self.nodes[kernel.0].requires_grad {
                        let dw = conv::backward_kernel_raw(&p.geom, p.batch, p.cin, p.cout, &g, self.value(*input).data());
                        acc(*kernel, dw);
                    }
                    if self.nodes[input.0].requires_grad {
                        let du = conv::forward_raw(&p.geom, p.batch, p.cin, p.cout, &g, self.value(*kernel).data());
                        acc(*input, du);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut gx = vec![0.0; self.value(*input).len()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src] += gi;
                    }
                    acc(*input, gx);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (batch, ch, inner) = split_at_axis(node.value.shape(), 1);
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; ch];
                    let mut dbeta = vec![0.0; ch];
                    let mut dx = vec![0.0; g.len()];
                    let count = (batch * inner) as f64;
                    for c in 0..ch {
                        let ids = (0..batch).flat_map(|b| ((b * ch + c) * inner)..((b * ch + c + 1) * inner));
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for k in ids.clone() {
                            sg += g[k];
                            sgx += g[k] * xhat[k];
                        }
                        dgamma[c] = sgx;
                        dbeta[c] = sg;
                        let scale = gam[c] * inv_std[c];
                        if *train {
                            for k in ids {
                                dx[k] = scale * (g[k] - sg / count - xhat[k] * sgx / count);
                            }
                        } else {
                            for k in ids {
                                dx[k] = scale * g[k];
                            }
                        }
                    }
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                    acc(*input, dx);
                }
                Op::Dropout { input, mask } => acc(*input, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
                Op::Custom { inputs, backward } => {
                    let grad_out = Tensor::new(node.value.shape().to_vec(), g)?;
                    let refs: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let grads = backward.backward(&grad_out, &refs, &node.value);
                    for (&v, gv) in inputs.iter().zip(grads) {
                        if let Some(t) = gv {
                            same_shape("custom backward", self.shape(v), t.shape())?;
                            acc(v, t.into_data());
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}
