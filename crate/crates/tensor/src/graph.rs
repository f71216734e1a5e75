use crate::kernels::{self, ConvGeom};
use crate::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        /// Batch statistics feed the normalization (training mode).
        batch_stats: bool,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Tanh(Var),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    ConcatChannels(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Affine {
        input: Var,
        scale: f32,
    },
    Abs(Var),
    LogClamped {
        input: Var,
        eps: f32,
    },
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Output of a training-mode batch norm: the normalized node plus the batch
/// statistics the caller folds into its running estimates.
pub struct BatchNormOutput {
    pub output: Var,
    pub mean: Vec<f32>,
    /// Unbiased variance estimate, as used for running statistics.
    pub var_unbiased: Vec<f32>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Tape of operations recorded in execution order. Nodes are immutable once
/// recorded; `backward` walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const BN_EPS: f32 = 1e-5;

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

    /// Records a leaf. Parameters pass `requires_grad = true`; data and
    /// detached values pass `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Copies the value of `var` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// 2-D convolution with square kernels. `weight` is `[O, C, k, k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c || kh != kw {
            return Err(TensorError::Shape(format!(
                "conv2d: weight {:?} incompatible with input {:?}",
                self.shape(weight),
                self.shape(input)
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(TensorError::Shape(format!(
                "conv2d: kernel {kh} with pad {pad} does not fit input {h}x{w}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &geom,
            self.value(weight).data(),
            o,
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, o, geom.out_height(), geom.out_width()], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    fn check_bn_params(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape(format!(
                "batch_norm: affine params {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((n, c, h * w))
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, hw) = self.check_bn_params(input, gamma, beta)?;
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in base..base + hw {
                    let xh = (x[i] - m) * is;
                    xhat[i] = xh;
                    out[i] = gg * xh + bb;
                }
            }
        }
        let value = Tensor::new(self.shape(input), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Batch norm normalizing with the statistics of the current batch.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<BatchNormOutput> {
        let (n, c, hw) = self.check_bn_params(input, gamma, beta)?;
        let (mean, var) = kernels::channel_stats(self.value(input).data(), n, c, hw);
        let count = (n * hw) as f32;
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let var_unbiased = var.iter().map(|v| v * correction).collect();
        let output = self.bn_apply(input, gamma, beta, &mean, &var, true)?;
        Ok(BatchNormOutput {
            output,
            mean,
            var_unbiased,
        })
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<Var> {
        self.bn_apply(input, gamma, beta, running_mean, running_var, false)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        let value = self
            .value(input)
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.value(input).map(f32::tanh);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Tanh(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h < 2 || w < 2 {
            return Err(TensorError::Shape(format!(
                "max_pool2: input {h}x{w} too small"
            )));
        }
        let (out, argmax) = kernels::max_pool2(self.value(input).data(), n, c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let out = kernels::upsample2(self.value(input).data(), n, c, h, w);
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample2(input), rg))
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::Shape(format!(
                    "concat: {:?} does not match {:?} outside the channel axis",
                    self.shape(v),
                    self.shape(first)
                )));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                let d = self.value(v).data();
                out.extend_from_slice(&d[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::ConcatChannels(inputs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Element-wise maximum. On ties the gradient is split evenly, which
    /// keeps the op symmetric in its operands.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "maximum")?;
        let value = self.value(a).zip(self.value(b), f32::max);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Maximum(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f32, shift: f32) -> Var {
        let value = self.value(input).map(|v| scale * v + shift);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Affine { input, scale }, rg)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let value = self.value(input).map(f32::abs);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Abs(input), rg)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, input: Var, eps: f32) -> Var {
        let value = self.value(input).map(|v| v.max(eps).ln());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::LogClamped { input, eps }, rg)
    }

    /// Mean over all elements, producing a `[1]` tensor.
    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let s: f64 = t.data().iter().map(|&v| f64::from(v)).sum();
        let value = Tensor::scalar((s / t.numel() as f64) as f32);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Mean(input), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads)?;
            // leaves keep their gradient; interior nodes are released
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let n = x.shape()[0];
                let o = w.shape()[0];
                let cg = kernels::conv2d_backward(
                    x.data(),
                    n,
                    geom,
                    w.data(),
                    o,
                    gout.data(),
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, Tensor::new(x.shape(), gi)?);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *weight, Tensor::new(w.shape(), gw)?);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, Tensor::new(&[o], gb)?);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = gout.data();
                let gamma_v = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            sg += f64::from(g[i]);
                            sgx += f64::from(g[i]) * f64::from(xhat[i]);
                        }
                    }
                    dbeta[ch] = sg as f32;
                    dgamma[ch] = sgx as f32;
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0f32; g.len()];
                    for ch in 0..c {
                        let scale = gamma_v[ch] * inv_std[ch];
                        let mean_g = (f64::from(dbeta[ch]) / m) as f32;
                        let mean_gx = (f64::from(dgamma[ch]) / m) as f32;
                        for s in 0..n {
                            let base = (s * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    scale * (g[i] - mean_g - xhat[i] * mean_gx)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(gout.shape(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                let gi = gout.zip(x, |g, v| if v > 0.0 { g } else { slope * g });
                self.accumulate(grads, *input, gi);
            }
            Op::Tanh(input) => {
                let gi = gout.zip(&node.value, |g, y| g * (1.0 - y * y));
                self.accumulate(grads, *input, gi);
            }
            Op::Sigmoid(input) => {
                let gi = gout.zip(&node.value, |g, y| g * y * (1.0 - y));
                self.accumulate(grads, *input, gi);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = Tensor::zeros(self.shape(*input));
                let d = gi.data_mut();
                for (&g, &a) in gout.data().iter().zip(argmax) {
                    d[a as usize] += g;
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Upsample2(input) => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let gi = kernels::upsample2_backward(gout.data(), n, c, h, w);
                self.accumulate(grads, *input, Tensor::new(&[n, c, h, w], gi)?);
            }
            Op::ConcatChannels(inputs) => {
                let (n, total_c, h, w) = gout.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let mut gi = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            gi.extend_from_slice(&gout.data()[start..start + c * hw]);
                        }
                        self.accumulate(grads, v, Tensor::new(&[n, c, h, w], gi)?);
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, gout.zip(vb, |g, y| g * y));
                self.accumulate(grads, *b, gout.zip(va, |g, x| g * x));
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; va.len()];
                for (i, &g) in gout.data().iter().enumerate() {
                    if va[i] > vb[i] {
                        ga[i] = g;
                    } else if vb[i] > va[i] {
                        gb[i] = g;
                    } else {
                        ga[i] = 0.5 * g;
                        gb[i] = 0.5 * g;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(gout.shape(), ga)?);
                self.accumulate(grads, *b, Tensor::new(gout.shape(), gb)?);
            }
            Op::Affine { input, scale } => {
                self.accumulate(grads, *input, gout.map(|g| g * scale));
            }
            Op::Abs(input) => {
                let gi = gout.zip(self.value(*input), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *input, gi);
            }
            Op::LogClamped { input, eps } => {
                let gi = gout.zip(self.value(*input), |g, v| if v > *eps { g / v } else { 0.0 });
                self.accumulate(grads, *input, gi);
            }
            Op::Mean(input) => {
                let x = self.value(*input);
                let g = gout.item() / x.numel() as f32;
                self.accumulate(grads, *input, Tensor::full(x.shape(), g));
            }
        }
        Ok(())
    }
}
