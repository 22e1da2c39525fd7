use rand::Rng;

use super::kernels::{self, ConvDims};
use super::{matmul, Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Floor applied to L2 norms so zero vectors normalize to zero, never NaN.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded in; zero means uninitialized.
    pub updates: u64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Exponential moving average update, `r ← (1 − m)·r + m·batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = keep * *r + m * *b;
        }
        self.updates += 1;
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::of(v.f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.f64())).collect(),
            updates: self.updates,
        }
    }
}

/// Statistics of one training batch, returned so the caller can fold them
/// into its running stats.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub enum BatchNormMode<'a, T> {
    Train,
    Eval(&'a RunningStats<T>),
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    AvgPool2x2(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<T>,
    },
    ScaleBy {
        input: Var,
        scale: Var,
    },
    SelectCols {
        input: Var,
        start: usize,
    },
    LogSoftmax {
        input: Var,
        temperature: T,
    },
    BceWithLogits {
        input: Var,
        targets: Vec<T>,
    },
    KlSoftened {
        input: Var,
        teacher_probs: Vec<T>,
        student_log_probs: Vec<T>,
        temperature: T,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order and replays their adjoints in
/// reverse.
///
/// Calling [`Tape::backward`] a second time without [`Tape::reset_grads`] is
/// an error; gradients never silently accumulate across passes.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    backpropagated: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_log_softmax<T: Real>(row: &[T], temperature: T, out: &mut [T]) {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / temperature;
        total = total + o.exp();
    }
    let lse = total.ln();
    for o in out.iter_mut() {
        *o = *o - lse;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// 3×3 convolution with zero padding of 1, preserving spatial size.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [b, cin, h, w] = self.value(input).dims4("conv2d input")?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4("conv2d weight")?;
        if (kh, kw) != (3, 3) {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be 3x3, got {kh}x{kw}"
            )));
        }
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d input has {cin} channels but weight expects {wcin}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d bias shape {:?} does not match {cout} output channels",
                self.value(bias).shape()
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension("conv2d needs H, W >= 1".into()));
        }
        let dims = ConvDims {
            batch: b,
            cin,
            cout,
            h,
            w,
        };
        let out = kernels::conv3x3_forward(
            &dims,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![b, cout, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Per-channel batch normalization. Train mode normalizes with batch
    /// statistics and returns them; eval mode uses the running stats.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [b, c, h, w] = self.value(input).dims4("batchnorm2d input")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Dimension(format!(
                    "batchnorm2d {name} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        let hw = h * w;
        let n = b * hw;
        let x = self.value(input).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(Error::Contract(format!(
                        "batchnorm2d train mode needs B*H*W >= 2 per channel, got {n}"
                    )));
                }
                let nf = T::of(n as f64);
                let mean: Vec<T> = kernels::channel_sums(x, b, c, hw, |_, v| v)
                    .into_iter()
                    .map(|s| s / nf)
                    .collect();
                let ss = kernels::channel_sums(x, b, c, hw, |i, v| {
                    let d = v - mean[(i / hw) % c];
                    d * d
                });
                let var: Vec<T> = ss.iter().map(|&s| s / nf).collect();
                let var_unbiased = ss.iter().map(|&s| s / T::of((n - 1) as f64)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval(running) => {
                if !running.is_initialized() {
                    return Err(Error::Configuration(
                        "batchnorm2d eval mode with uninitialized running statistics".into(),
                    ));
                }
                if running.mean.len() != c {
                    return Err(Error::Dimension(format!(
                        "running stats hold {} channels, input has {c}",
                        running.mean.len()
                    )));
                }
                (running.mean.clone(), running.var.clone(), None)
            }
        };
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..x.len() {
            let ch = (i / hw) % c;
            xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + be[ch];
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let batch_stats = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(input), &[input])
    }

    /// Non-overlapping 2×2 mean pooling; a trailing odd row/column is dropped.
    pub fn avgpool2x2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("avgpool2x2 input")?;
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "avgpool2x2 needs H, W >= 2, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let src = &x[p * h * w..];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xo in 0..ow {
                    let i = 2 * y * w + 2 * xo;
                    dst[y * ow + xo] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2x2(input), &[input]))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 − rate)` at train
    /// time so eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let src = self.value(input);
        let mask: Vec<T> = (0..src.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let b = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product::<usize>();
        self.reshape(input, vec![b, rest])
    }

    /// Affine map `x · Wᵀ + b` with `x: [B, D]`, `W: [K, D]`, `b: [K]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [b, d] = self.value(input).dims2("dense input")?;
        let [k, wd] = self.value(weight).dims2("dense weight")?;
        if wd != d {
            return Err(Error::Dimension(format!(
                "dense input width {d} does not match weight width {wd}"
            )));
        }
        let mut out = vec![T::zero(); b * k];
        if let Some(bias) = bias {
            let bv = self.value(bias);
            if bv.shape() != [k] {
                return Err(Error::Dimension(format!(
                    "dense bias shape {:?} does not match {k} outputs",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(k) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul(
            b,
            d,
            k,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![b, k], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &inputs,
        ))
    }

    /// Scales each row of a 2-d tensor to unit L2 norm (norms floored at
    /// `1e-12`).
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let [r, d] = self.value(input).dims2("l2_normalize_rows input")?;
        let x = self.value(input).data();
        let eps = T::of(NORM_EPS);
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![T::zero(); r * d];
        for i in 0..r {
            let row = &x[i * d..(i + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let value = Tensor::new(vec![r, d], out)?;
        Ok(self.push(value, Op::L2NormalizeRows { input, norms }, &[input]))
    }

    /// Multiplies every element by a one-element tensor.
    pub fn scale_by(&mut self, input: Var, scale: Var) -> Result<Var> {
        let s = self.value(scale);
        if s.len() != 1 {
            return Err(Error::Dimension(format!(
                "scale_by expects a one-element scale, got shape {:?}",
                s.shape()
            )));
        }
        let s = s.data()[0];
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScaleBy { input, scale }, &[input, scale]))
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn select_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let [r, c] = self.value(input).dims2("select_cols input")?;
        if start > end || end > c {
            return Err(Error::Dimension(format!(
                "column range {start}..{end} outside width {c}"
            )));
        }
        let x = self.value(input).data();
        let width = end - start;
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        let value = Tensor::new(vec![r, width], out)?;
        Ok(self.push(value, Op::SelectCols { input, start }, &[input]))
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax(&mut self, input: Var, temperature: f64) -> Result<Var> {
        let [r, c] = self.value(input).dims2("log_softmax input")?;
        if c == 0 {
            return Err(Error::Contract("log_softmax over an empty row".into()));
        }
        let t = T::of(temperature);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            row_log_softmax(&x[i * c..(i + 1) * c], t, &mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            value,
            Op::LogSoftmax {
                input,
                temperature: t,
            },
            &[input],
        ))
    }

    /// Elementwise binary cross-entropy of `sigmoid(x)` against `targets`,
    /// in the overflow-free form `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, input: Var, targets: &[T]) -> Result<Var> {
        let src = self.value(input);
        if targets.len() != src.len() {
            return Err(Error::Dimension(format!(
                "bce targets have {} values, logits have {}",
                targets.len(),
                src.len()
            )));
        }
        let data = src
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::BceWithLogits {
                input,
                targets: targets.to_vec(),
            },
            &[input],
        ))
    }

    /// Batch-mean `KL(softmax(teacher/T) ‖ softmax(student/T))` with the
    /// teacher logits held constant.
    pub fn kl_softened(
        &mut self,
        student: Var,
        teacher_logits: &[T],
        temperature: f64,
    ) -> Result<Var> {
        let [r, c] = self.value(student).dims2("kl_softened student")?;
        if teacher_logits.len() != r * c {
            return Err(Error::Dimension(format!(
                "teacher provides {} logits, student has {r}x{c}",
                teacher_logits.len()
            )));
        }
        if c == 0 {
            return Err(Error::Contract("kl_softened over empty rows".into()));
        }
        let t = T::of(temperature);
        let s = self.value(student).data();
        let mut teacher_log = vec![T::zero(); r * c];
        let mut student_log = vec![T::zero(); r * c];
        for i in 0..r {
            let span = i * c..(i + 1) * c;
            row_log_softmax(&teacher_logits[span.clone()], t, &mut teacher_log[span.clone()]);
            row_log_softmax(&s[span.clone()], t, &mut student_log[span]);
        }
        let teacher_probs: Vec<T> = teacher_log.iter().map(|v| v.exp()).collect();
        let mut total = T::zero();
        for i in 0..r * c {
            let p = teacher_probs[i];
            if p > T::zero() {
                total = total + p * (teacher_log[i] - student_log[i]);
            }
        }
        let value = Tensor::scalar(total / T::of(r as f64));
        Ok(self.push(
            value,
            Op::KlSoftened {
                input: student,
                teacher_probs,
                student_log_probs: student_log,
                temperature: t,
            },
            &[student],
        ))
    }

    /// `Σ wᵢ·xᵢ` against constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let src = self.value(input);
        if weights.len() != src.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} values",
                weights.len(),
                src.len()
            )));
        }
        let total = src.data().iter().zip(weights).map(|(&x, &w)| x * w).sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            &[input],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y).map(|v| self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y).map(|v| self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn mul_const(&mut self, input: Var, c: f64) -> Var {
        let c = T::of(c);
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::MulConst(input, c), &[input])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Clears every stored gradient so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backpropagated = false;
    }

    /// Reverse-mode pass from a one-element loss. Afterwards every
    /// `requires_grad` value that the loss depends on holds its gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backpropagated = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.adjoint(i, &g);
            for (v, contrib) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Gradient contributions of node `i` onto its inputs.
    fn adjoint(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let [b, cin, h, w] = self.value(*input).dims4("").expect("checked");
                let cout = out_shape[1];
                let grads = kernels::conv3x3_backward(
                    &ConvDims {
                        batch: b,
                        cin,
                        cout,
                        h,
                        w,
                    },
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    [needs(*input), needs(*weight), needs(*bias)],
                );
                out.extend(grads.input.map(|v| (*input, v)));
                out.extend(grads.weight.map(|v| (*weight, v)));
                out.extend(grads.bias.map(|v| (*bias, v)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [b, c, h, w] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
                let hw = h * w;
                let sum_g = kernels::channel_sums(g, b, c, hw, |_, v| v);
                let sum_gx = kernels::channel_sums(g, b, c, hw, |i, v| v * xhat[i]);
                if needs(*input) {
                    let gm = self.value(*gamma).data();
                    let n = T::of((b * hw) as f64);
                    let gx = (0..g.len())
                        .map(|i| {
                            let ch = (i / hw) % c;
                            let scale = gm[ch] * inv_std[ch];
                            if *batch_stats {
                                scale / n * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                            } else {
                                scale * g[i]
                            }
                        })
                        .collect();
                    out.push((*input, gx));
                }
                if needs(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if needs(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let gx = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*input, gx));
            }
            Op::AvgPool2x2(input) => {
                let [b, c, h, w] = self.value(*input).dims4("").expect("checked");
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut gx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let gv = g[p * oh * ow + y * ow + xo] * quarter;
                            let i = p * h * w + 2 * y * w + 2 * xo;
                            gx[i] = gv;
                            gx[i + 1] = gv;
                            gx[i + w] = gv;
                            gx[i + w + 1] = gv;
                        }
                    }
                }
                out.push((*input, gx));
            }
            Op::Dropout { input, mask } => {
                out.push((*input, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()));
            }
            Op::Reshape(input) => out.push((*input, g.to_vec())),
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let [b, d] = self.value(*input).dims2("").expect("checked");
                let k = out_shape[1];
                if needs(*input) {
                    let mut gx = vec![T::zero(); b * d];
                    matmul(b, k, d, g, false, self.value(*weight).data(), false, T::zero(), &mut gx);
                    out.push((*input, gx));
                }
                if needs(*weight) {
                    let mut gw = vec![T::zero(); k * d];
                    matmul(k, b, d, g, true, self.value(*input).data(), false, T::zero(), &mut gw);
                    out.push((*weight, gw));
                }
                if let Some(bias) = bias.filter(|v| needs(*v)) {
                    let mut gb = vec![T::zero(); k];
                    for row in g.chunks(k) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    out.push((bias, gb));
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let d = out_shape[1];
                let y = node.value.data();
                let eps = T::of(NORM_EPS);
                let raw = self.value(*input).data();
                let mut gx = vec![T::zero(); g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let raw_norm = raw[span.clone()].iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw_norm > eps {
                        let dot: T = y[span.clone()].iter().zip(&g[span.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in span {
                            gx[j] = (g[j] - y[j] * dot) / n;
                        }
                    } else {
                        for j in span {
                            gx[j] = g[j] / n;
                        }
                    }
                }
                out.push((*input, gx));
            }
            Op::ScaleBy { input, scale } => {
                let s = self.value(*scale).data()[0];
                if needs(*input) {
                    out.push((*input, g.iter().map(|&v| v * s).collect()));
                }
                if needs(*scale) {
                    let x = self.value(*input).data();
                    let gs = x.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    out.push((*scale, vec![gs]));
                }
            }
            Op::SelectCols { input, start } => {
                let [r, c] = self.value(*input).dims2("").expect("checked");
                let width = out_shape[1];
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + width]
                        .copy_from_slice(&g[i * width..(i + 1) * width]);
                }
                out.push((*input, gx));
            }
            Op::LogSoftmax { input, temperature } => {
                let c = out_shape[1];
                let y = node.value.data();
                let mut gx = vec![T::zero(); g.len()];
                for (r, grow) in g.chunks(c).enumerate() {
                    let total: T = grow.iter().copied().sum();
                    for j in 0..c {
                        let k = r * c + j;
                        gx[k] = (grow[j] - y[k].exp() * total) / *temperature;
                    }
                }
                out.push((*input, gx));
            }
            Op::BceWithLogits { input, targets } => {
                let x = self.value(*input).data();
                let gx = x
                    .iter()
                    .zip(targets)
                    .zip(g)
                    .map(|((&v, &y), &gv)| (sigmoid(v) - y) * gv)
                    .collect();
                out.push((*input, gx));
            }
            Op::KlSoftened {
                input,
                teacher_probs,
                student_log_probs,
                temperature,
            } => {
                let r = self.value(*input).shape()[0];
                let scale = g[0] / (*temperature * T::of(r as f64));
                let gx = student_log_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(&lq, &p)| (lq.exp() - p) * scale)
                    .collect();
                out.push((*input, gx));
            }
            Op::WeightedSum { input, weights } => {
                out.push((*input, weights.iter().map(|&w| w * g[0]).collect()));
            }
            Op::Sum(input) => {
                out.push((*input, vec![g[0]; self.value(*input).len()]));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
                out.push((*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect()));
            }
            Op::MulConst(input, c) => {
                out.push((*input, g.iter().map(|&v| v * *c).collect()));
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
