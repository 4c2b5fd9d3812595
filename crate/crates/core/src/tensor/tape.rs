use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{self, ConvGeometry};
use super::{numel, Parameter, Tensor};
use crate::error::{Error, Result};

/// Floor applied to every logarithm: `ln(max(p, LOG_CLAMP))`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Negate,
    Scale(f64),
    AddScalar(f64),
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Log,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Binary(ElementwiseOp, Var, Var),
    Unary(ElementwiseOp, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        transposed: bool,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Reshape(Var),
    Concat(Var, Var),
    AvgPool(Var, usize),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    grad_on: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. A tape is single-use: build one per training step.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params_trainable: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss, keyed by parameter name. A parameter
/// registered several times on one tape receives the sum of its uses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Adds each gradient into the matching parameter's stored grad.
    /// Repeated calls accumulate; parameters absent from the loss are left
    /// untouched.
    pub fn accumulate_into(&self, params: &mut [Parameter]) {
        for p in params {
            if let Some(g) = self.by_name.get(p.name()) {
                p.tensor_mut().accumulate_grad(g);
            }
        }
    }

    fn add(&mut self, name: &str, g: Vec<f64>) {
        match self.by_name.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
            None => {
                self.by_name.insert(String::from(name), g);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params_trainable: true,
        }
    }

    /// When off, parameters registered afterwards are recorded as constants.
    pub fn set_params_trainable(&mut self, on: bool) {
        self.params_trainable = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, grad_on: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            grad_on,
        });
        Var(self.nodes.len() - 1)
    }

    fn on(&self, v: Var) -> bool {
        self.nodes[v.0].grad_on
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape.clone(), t.values, Op::Leaf, false))
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        let t = p.tensor();
        if self.params_trainable && t.requires_grad() {
            self.push(
                t.shape().to_vec(),
                t.values().to_vec(),
                Op::Param(String::from(p.name())),
                true,
            )
        } else {
            self.constant(t)
        }
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseOp::*;
        match (op, b) {
            (Add | Sub | Mul, Some(b)) => self.binary(op, a, b),
            (Add | Sub | Mul, None) => Err(Error::Config(alloc::format!("{op:?} needs a second operand"))),
            (_, Some(_)) => Err(Error::Config(alloc::format!("{op:?} is unary"))),
            (_, None) => Ok(self.unary(op, a)),
        }
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (la, lb) = (numel(sa), numel(sb));
        let shape = if sa == sb || lb == 1 {
            sa.clone()
        } else if la == 1 {
            sb.clone()
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                left: sa.clone(),
                right: sb.clone(),
            });
        };
        let n = numel(&shape);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let at = |i: usize| va[if la == 1 { 0 } else { i }];
        let bt = |i: usize| vb[if lb == 1 { 0 } else { i }];
        let value: Vec<f64> = match op {
            ElementwiseOp::Add => (0..n).map(|i| at(i) + bt(i)).collect(),
            ElementwiseOp::Sub => (0..n).map(|i| at(i) - bt(i)).collect(),
            ElementwiseOp::Mul => (0..n).map(|i| at(i) * bt(i)).collect(),
            _ => unreachable!(),
        };
        let on = self.on(a) || self.on(b);
        Ok(self.push(shape, value, Op::Binary(op, a, b), on))
    }

    fn unary(&mut self, op: ElementwiseOp, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let value: Vec<f64> = match op {
            ElementwiseOp::Negate => x.iter().map(|v| -v).collect(),
            ElementwiseOp::Scale(c) => x.iter().map(|v| v * c).collect(),
            ElementwiseOp::AddScalar(c) => x.iter().map(|v| v + c).collect(),
            ElementwiseOp::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            ElementwiseOp::LeakyRelu(alpha) => x.iter().map(|&v| if v > 0.0 { v } else { alpha * v }).collect(),
            ElementwiseOp::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            ElementwiseOp::Tanh => x.iter().map(|&v| libm::tanh(v)).collect(),
            ElementwiseOp::Log => x.iter().map(|&v| clamped_ln(v)).collect(),
            ElementwiseOp::Exp => x.iter().map(|&v| libm::exp(v)).collect(),
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => unreachable!(),
        };
        let shape = self.nodes[a.0].shape.clone();
        let on = self.on(a);
        self.push(shape, value, Op::Unary(op, a), on)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Negate, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(ElementwiseOp::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(ElementwiseOp::AddScalar(c), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(ElementwiseOp::LeakyRelu(alpha), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Tanh, a)
    }

    /// `ln(max(x, LOG_CLAMP))`; the gradient is zero where the clamp is active.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Exp, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: sa.clone(),
                    right: sb.clone(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let on = self.on(a) || self.on(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), on))
    }

    /// Adds a length-F bias to every row of an `N×F` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        let f = match (sx.as_slice(), sb.as_slice()) {
            ([_, f], [fb]) if f == fb => *f,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    left: sx.clone(),
                    right: sb.clone(),
                })
            }
        };
        let b = &self.nodes[bias.0].value;
        let value: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % f])
            .collect();
        let shape = sx.clone();
        let on = self.on(x) || self.on(bias);
        Ok(self.push(shape, value, Op::AddBias(x, bias), on))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::conv2d(self.shape(input), self.shape(kernel), stride, padding)?;
        self.check_bias(bias, geom.out_channels, "conv2d")?;
        let mut out = vec![0.0; numel(&geom.output_shape())];
        conv::forward(&geom, self.value(input), self.value(kernel), &mut out);
        self.finish_conv(input, kernel, bias, geom, false, out, geom.output_shape().to_vec())
    }

    /// Transposed convolution with kernel `F_in×C_out×kh×kw`; the forward map
    /// is the input-adjoint of [`Tape::conv2d`] with the same kernel.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::transpose(self.shape(input), self.shape(kernel), stride, padding)?;
        self.check_bias(bias, geom.in_channels, "conv2d_transpose")?;
        let mut out = vec![0.0; numel(&geom.input_shape())];
        conv::backward_input(&geom, self.value(input), self.value(kernel), &mut out);
        self.finish_conv(input, kernel, bias, geom, true, out, geom.input_shape().to_vec())
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
        match bias {
            Some(b) if self.shape(b) != [channels] => Err(Error::ShapeMismatch {
                op,
                left: vec![channels],
                right: self.shape(b).to_vec(),
            }),
            _ => Ok(()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_conv(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        transposed: bool,
        mut out: Vec<f64>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        if let Some(b) = bias {
            let plane = shape[2] * shape[3];
            let bv = &self.nodes[b.0].value;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let c = i % shape[1];
                chunk.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let on = self.on(input) || self.on(kernel) || bias.is_some_and(|b| self.on(b));
        let op = Op::Conv {
            input,
            kernel,
            bias,
            geom,
            transposed,
        };
        Ok(self.push(shape, out, op, on))
    }

    /// Per-channel batch normalization over `N×C×…`. Train mode uses batch
    /// statistics and updates `stats`; eval mode uses `stats` unchanged.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: shape,
                right: vec![],
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    left: shape.clone(),
                    right: self.shape(v).to_vec(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm running stats",
                left: vec![c],
                right: vec![stats.mean.len()],
            });
        }
        let train = mode == BatchNormMode::Train;
        if train && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let x = &self.nodes[input.0].value;
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for_channel(n, c, inner, |ch, i| mean[ch] += x[i]);
            mean.iter_mut().for_each(|m| *m /= count);
            for_channel(n, c, inner, |ch, i| {
                let d = x[i] - mean[ch];
                var[ch] += d * d;
            });
            var.iter_mut().for_each(|v| *v /= count);
            let m = stats.momentum;
            for ch in 0..c {
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean[ch];
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * var[ch] * count / (count - 1.0);
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + stats.eps)).collect();
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for_channel(n, c, inner, |ch, i| {
            xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + b[ch];
        });
        let on = self.on(input) || self.on(gamma) || self.on(beta);
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok(self.push(shape, out, op, on))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x);
        if numel(from) != numel(shape) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: from.to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let on = self.on(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), on))
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let inner: usize = sa[2..].iter().product();
        let (ra, rb) = (sa[1] * inner, sb[1] * inner);
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(va.len() + vb.len());
        for i in 0..sa[0] {
            value.extend_from_slice(&va[i * ra..(i + 1) * ra]);
            value.extend_from_slice(&vb[i * rb..(i + 1) * rb]);
        }
        let on = self.on(a) || self.on(b);
        Ok(self.push(shape, value, Op::Concat(a, b), on))
    }

    /// Non-overlapping `k×k` average pooling over `N×C×H×W`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = <[usize; 4]>::try_from(s.as_slice()).map_err(|_| Error::ShapeMismatch {
            op: "avg_pool2d",
            left: s.clone(),
            right: vec![k, k],
        })?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2d",
                left: s,
                right: vec![k, k],
            });
        }
        let (oh, ow) = (h / k, w / k);
        let v = self.value(x);
        let mut out = vec![0.0; n * c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[plane * oh * ow + (y / k) * ow + xx / k] += v[plane * h * w + y * w + xx] * norm;
                }
            }
        }
        let on = self.on(x);
        Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool(x, k), on))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let on = self.on(x);
        self.push(vec![1], vec![s], Op::Sum(x), on)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let on = self.on(x);
        self.push(vec![1], vec![m], Op::Mean(x), on)
    }

    /// Row-wise softmax of an `N×K` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = match s.as_slice() {
            [_, k] => *k,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    left: s,
                    right: vec![],
                })
            }
        };
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = libm::exp(*v - max));
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        let on = self.on(x);
        Ok(self.push(s, out, Op::Softmax(x), on))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad_on {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].grad_on {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => out.add(name, g.to_vec()),
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (la, lb) = (va.len(), vb.len());
                let at = |i: usize| va[if la == 1 { 0 } else { i }];
                let bt = |i: usize| vb[if lb == 1 { 0 } else { i }];
                let (da, db): (f64, f64) = match op {
                    ElementwiseOp::Add => (1.0, 1.0),
                    ElementwiseOp::Sub => (1.0, -1.0),
                    _ => (0.0, 0.0),
                };
                let is_mul = matches!(op, ElementwiseOp::Mul);
                acc(*a, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        let d = if is_mul { gi * bt(i) } else { gi * da };
                        s[if la == 1 { 0 } else { i }] += d;
                    }
                });
                acc(*b, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        let d = if is_mul { gi * at(i) } else { gi * db };
                        s[if lb == 1 { 0 } else { i }] += d;
                    }
                });
            }
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let y = &node.value;
                acc(*a, &mut |s| {
                    for i in 0..g.len() {
                        let d = match *op {
                            ElementwiseOp::Negate => -1.0,
                            ElementwiseOp::Scale(c) => c,
                            ElementwiseOp::AddScalar(_) => 1.0,
                            ElementwiseOp::Relu => (x[i] > 0.0) as u8 as f64,
                            ElementwiseOp::LeakyRelu(alpha) => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    alpha
                                }
                            }
                            ElementwiseOp::Sigmoid => y[i] * (1.0 - y[i]),
                            ElementwiseOp::Tanh => 1.0 - y[i] * y[i],
                            ElementwiseOp::Log => {
                                if x[i] > LOG_CLAMP {
                                    1.0 / x[i]
                                } else {
                                    0.0
                                }
                            }
                            ElementwiseOp::Exp => y[i],
                            _ => unreachable!(),
                        };
                        s[i] += g[i] * d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = 0.0;
                            for j in 0..n {
                                t += g[i * n + j] * vb[p * n + j];
                            }
                            s[i * k + p] += t;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = va[i * k + p];
                            let row = &mut s[p * n..(p + 1) * n];
                            row.iter_mut()
                                .zip(&g[i * n..(i + 1) * n])
                                .for_each(|(r, gg)| *r += a_ip * gg);
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let f = self.shape(*b)[0];
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| g.iter().enumerate().for_each(|(i, g)| s[i % f] += g));
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
                transposed,
            } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                if *transposed {
                    acc(*input, &mut |s| conv::forward(geom, g, k, s));
                    acc(*kernel, &mut |s| conv::backward_kernel(geom, g, x, s));
                } else {
                    acc(*input, &mut |s| conv::backward_input(geom, g, k, s));
                    acc(*kernel, &mut |s| conv::backward_kernel(geom, x, g, s));
                }
                if let Some(b) = bias {
                    let (channels, plane) = (node.shape[1], node.shape[2] * node.shape[3]);
                    acc(*b, &mut |s| {
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            s[i % channels] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c) = (node.shape[0], node.shape[1]);
                let inner: usize = node.shape[2..].iter().product();
                let gm = self.value(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for_channel(n, c, inner, |ch, i| {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat[i];
                });
                acc(*gamma, &mut |s| s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v));
                acc(*beta, &mut |s| s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v));
                let count = (n * inner) as f64;
                acc(*input, &mut |s| {
                    for_channel(n, c, inner, |ch, i| {
                        s[i] += if *train {
                            gm[ch] * inv_std[ch] / count * (count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                        } else {
                            gm[ch] * inv_std[ch] * g[i]
                        };
                    })
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Concat(a, b) => {
                let inner: usize = node.shape[2..].iter().product();
                let ra = self.shape(*a)[1] * inner;
                let rb = self.shape(*b)[1] * inner;
                let n = node.shape[0];
                acc(*a, &mut |s| {
                    for i in 0..n {
                        let src = &g[i * (ra + rb)..i * (ra + rb) + ra];
                        s[i * ra..(i + 1) * ra].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..n {
                        let src = &g[i * (ra + rb) + ra..(i + 1) * (ra + rb)];
                        s[i * rb..(i + 1) * rb].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::AvgPool(x, k) => {
                let s_in = self.shape(*x);
                let (h, w) = (s_in[2], s_in[3]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let planes = s_in[0] * s_in[1];
                acc(*x, &mut |s| {
                    for plane in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                s[plane * h * w + y * w + xx] += g[plane * oh * ow + (y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / self.value(*x).len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += scale));
            }
            Op::Softmax(x) => {
                let k = node.shape[1];
                let y = &node.value;
                acc(*x, &mut |s| {
                    for r in 0..node.shape[0] {
                        let row = r * k..(r + 1) * k;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(g, y)| g * y).sum();
                        for i in row {
                            s[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn for_channel(n: usize, c: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                f(ch, i);
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            row.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, b)| *o += a_ip * b);
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub(crate) fn clamped_ln(v: f64) -> f64 {
    libm::log(if v > LOG_CLAMP { v } else { LOG_CLAMP })
}
