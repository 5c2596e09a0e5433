//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Each operation appends a node holding its forward value and enough saved
//! state to run the backward rule. The tape is append-only and topologically
//! ordered by creation, so backward is a single reverse sweep. Gradients
//! accumulate additively when a value feeds multiple consumers.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, Conv2dParams, LinearParams};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulChannels { map: Var, vec: Var },
    MulInstance { map: Var, scalar: Var },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    Linear { input: Var, weight: Var, bias: Var },
    Relu(Var),
    LeakyRelu1 { input: Var, leak: T },
    GlobalAvgPool(Var),
    BatchNormTrain { input: Var, scale: Var, shift: Var, mean: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { input: Var, scale: Var, shift: Var, mean: Vec<T>, inv_std: Vec<T> },
    Sum(Var),
    Abs(Var),
    CrossEntropyMean { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let needs = self.needs(a);
        self.push(value, needs, Op::Scale(a, s))
    }

    /// `map (N,C,H,W) * vec (N,C)`, broadcasting each per-instance channel
    /// scale over the channel's spatial extent.
    pub fn mul_channels(&mut self, map: Var, vec: Var) -> Result<Var> {
        let value = self.value(map).mul_channels(self.value(vec))?;
        let needs = self.needs(map) || self.needs(vec);
        Ok(self.push(value, needs, Op::MulChannels { map, vec }))
    }

    /// `map (N,C,H,W) * scalar (N,1)`, one scale factor per instance.
    pub fn mul_instance(&mut self, map: Var, scalar: Var) -> Result<Var> {
        let value = self.value(map).mul_instance(self.value(scalar))?;
        let needs = self.needs(map) || self.needs(scalar);
        Ok(self.push(value, needs, Op::MulInstance { map, scalar }))
    }

    fn conv_params(&self, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Conv2dParams<T>> {
        Conv2dParams::new(
            self.value(weight).clone(),
            bias.map(|b| self.value(b).clone()),
            stride,
            padding,
        )
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let p = self.conv_params(weight, bias, stride, padding)?;
        let value = ops::conv2d_forward(self.value(input), &p)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, needs, Op::Conv2d { input, weight, bias, stride, padding }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let p = LinearParams::new(self.value(weight).clone(), self.value(bias).clone())?;
        let value = ops::linear_forward(self.value(input), &p)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, needs, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = ops::relu_forward(self.value(input));
        let needs = self.needs(input);
        self.push(value, needs, Op::Relu(input))
    }

    /// ReLU-1 with a leak slope outside (0,1]. `leak = 0` is the standard
    /// inference-mode clamp to [0,1].
    pub fn leaky_relu1(&mut self, input: Var, leak: T) -> Var {
        let one = T::one();
        let zero = T::zero();
        let value = self.value(input).map(|x| {
            if x <= zero {
                leak * x
            } else if x <= one {
                x
            } else {
                one + leak * (x - one)
            }
        });
        let needs = self.needs(input);
        self.push(value, needs, Op::LeakyRelu1 { input, leak })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let value = ops::global_avg_pool_forward(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::GlobalAvgPool(input)))
    }

    /// Training-mode batch norm: normalizes by batch statistics and updates
    /// the running statistics in `bn` (exclusive access per parameter set).
    pub fn batch_norm_train(&mut self, input: Var, scale: Var, shift: Var, bn: &mut BatchNormParams<T>) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if c != bn.channels() {
            return Err(Error::ChannelMismatch { input: c, expected: bn.channels() });
        }
        let hw = h * w;
        let m = n * hw;
        let inv_m = T::one() / T::from_f64(m as f64);
        let eps = T::from_f64(bn.epsilon);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                s += x.data()[base..base + hw].iter().copied().sum::<T>();
            }
            let mu = s * inv_m;
            let mut v = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for &xv in &x.data()[base..base + hw] {
                    let d = xv - mu;
                    v += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = v * inv_m; // biased variance
        }
        let mom = T::from_f64(bn.momentum);
        let keep = T::one() - mom;
        for ch in 0..c {
            bn.running_mean.data_mut()[ch] = keep * bn.running_mean.data()[ch] + mom * mean[ch];
            bn.running_var.data_mut()[ch] = keep * bn.running_var.data()[ch] + mom * var[ch];
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        let mut out = Tensor::zeros(x.shape().to_vec());
        {
            let xd = self.value(input).data();
            let od = out.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let a = sc[ch] * inv_std[ch];
                    let b = sh[ch] - mean[ch] * a;
                    for j in base..base + hw {
                        od[j] = a * xd[j] + b;
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(scale) || self.needs(shift);
        Ok(self.push(out, needs, Op::BatchNormTrain { input, scale, shift, mean, inv_std }))
    }

    /// Eval-mode batch norm: per-channel affine from running statistics.
    /// Never mutates running stats.
    pub fn batch_norm_eval(&mut self, input: Var, scale: Var, shift: Var, bn: &BatchNormParams<T>) -> Result<Var> {
        let x = self.value(input);
        let (_n, c, _h, _w) = x.dims4()?;
        if c != bn.channels() {
            return Err(Error::ChannelMismatch { input: c, expected: bn.channels() });
        }
        let eps = T::from_f64(bn.epsilon);
        let mean = bn.running_mean.data().to_vec();
        let inv_std: Vec<T> = bn.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let value = {
            let mut p = bn.clone();
            p.scale = self.value(scale).clone();
            p.shift = self.value(shift).clone();
            ops::batch_norm_eval_forward(x, &p, None)?
        };
        let needs = self.needs(input) || self.needs(scale) || self.needs(shift);
        Ok(self.push(value, needs, Op::BatchNormEval { input, scale, shift, mean, inv_std }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let needs = self.needs(input);
        self.push(value, needs, Op::Sum(input))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.abs());
        let needs = self.needs(input);
        self.push(value, needs, Op::Abs(input))
    }

    /// Mean cross-entropy over a (N, K) logits batch with integer labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (n, k) = l.dims2()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch { left: vec![labels.len()], right: vec![n] });
        }
        for &y in labels {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
        }
        let mut probs = Tensor::zeros(vec![n, k]);
        let mut loss = T::zero();
        for i in 0..n {
            let row = &l.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs.data_mut()[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs.data_mut()[i * k + j] /= denom;
            }
            let log_p = (row[labels[i]] - max) - denom.ln();
            loss -= log_p;
        }
        loss /= T::from_f64(n as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::CrossEntropyMean { logits, labels: labels.to_vec(), probs },
        ))
    }

    fn accumulate(&mut self, v: Var, delta: &Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => g.axpy(T::one(), delta),
            slot @ None => {
                *slot = Some(delta.clone());
                Ok(())
            }
        }
    }

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf reachable
    /// from `loss` ends up holding dLoss/dLeaf. Consumes the tape: a second
    /// call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss_value.shape().to_vec() });
        }
        self.nodes[loss.0].grad = Some(Tensor::new(loss_value.shape().to_vec(), vec![T::one()])?);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let grad = self.nodes[id].grad.clone().unwrap();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &grad)?;
                    self.accumulate(b, &grad)?;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad.mul(self.value(b))?;
                    let db = grad.mul(self.value(a))?;
                    self.accumulate(a, &da)?;
                    self.accumulate(b, &db)?;
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    let da = grad.scale(s);
                    self.accumulate(a, &da)?;
                }
                Op::MulChannels { map, vec } => {
                    let (map, vec) = (*map, *vec);
                    let d_map = grad.mul_channels(self.value(vec))?;
                    // dVec[n,c] = sum_hw grad * map
                    let m = self.value(map);
                    let (n, c, h, w) = m.dims4()?;
                    let hw = h * w;
                    let mut d_vec = Tensor::zeros(vec![n, c]);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let mut s = T::zero();
                            for j in base..base + hw {
                                s += grad.data()[j] * m.data()[j];
                            }
                            d_vec.data_mut()[i * c + ch] = s;
                        }
                    }
                    self.accumulate(map, &d_map)?;
                    self.accumulate(vec, &d_vec)?;
                }
                Op::MulInstance { map, scalar } => {
                    let (map, scalar) = (*map, *scalar);
                    let d_map = grad.mul_instance(self.value(scalar))?;
                    let m = self.value(map);
                    let (n, c, h, w) = m.dims4()?;
                    let chw = c * h * w;
                    let mut d_s = Tensor::zeros(self.value(scalar).shape().to_vec());
                    for i in 0..n {
                        let mut s = T::zero();
                        for j in i * chw..(i + 1) * chw {
                            s += grad.data()[j] * m.data()[j];
                        }
                        d_s.data_mut()[i] = s;
                    }
                    self.accumulate(map, &d_map)?;
                    self.accumulate(scalar, &d_s)?;
                }
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let (stride, padding) = (*stride, *padding);
                    let p = self.conv_params(weight, bias, stride, padding)?;
                    let (dx, dw, db) = ops::conv2d_backward(self.value(input), &p, &grad)?;
                    self.accumulate(input, &dx)?;
                    self.accumulate(weight, &dw)?;
                    if let (Some(b), Some(db)) = (bias, db) {
                        self.accumulate(b, &db)?;
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let p = LinearParams::new(self.value(weight).clone(), self.value(bias).clone())?;
                    let (dx, dw, db) = ops::linear_backward(self.value(input), &p, &grad)?;
                    self.accumulate(input, &dx)?;
                    self.accumulate(weight, &dw)?;
                    self.accumulate(bias, &db)?;
                }
                Op::Relu(a) => {
                    let a = *a;
                    let x = self.value(a);
                    let mut d = grad.clone();
                    for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    self.accumulate(a, &d)?;
                }
                Op::LeakyRelu1 { input, leak } => {
                    let (a, leak) = (*input, *leak);
                    let x = self.value(a);
                    let one = T::one();
                    let mut d = grad.clone();
                    for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() || xv > one {
                            *g = *g * leak;
                        }
                    }
                    self.accumulate(a, &d)?;
                }
                Op::GlobalAvgPool(a) => {
                    let a = *a;
                    let x = self.value(a);
                    let (n, c, h, w) = x.dims4()?;
                    let hw = h * w;
                    let inv = T::one() / T::from_f64(hw as f64);
                    let mut d = Tensor::zeros(x.shape().to_vec());
                    for i in 0..n {
                        for ch in 0..c {
                            let g = grad.data()[i * c + ch] * inv;
                            let base = (i * c + ch) * hw;
                            d.data_mut()[base..base + hw].iter_mut().for_each(|v| *v = g);
                        }
                    }
                    self.accumulate(a, &d)?;
                }
                Op::BatchNormTrain { input, scale, shift, mean, inv_std } => {
                    let (input, scale, shift) = (*input, *scale, *shift);
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let x = self.value(input);
                    let (n, c, h, w) = x.dims4()?;
                    let hw = h * w;
                    let m = T::from_f64((n * hw) as f64);
                    let sc = self.value(scale).data().to_vec();
                    let mut d_scale = Tensor::zeros(vec![c]);
                    let mut d_shift = Tensor::zeros(vec![c]);
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    for ch in 0..c {
                        let mu = mean[ch];
                        let istd = inv_std[ch];
                        let mut sum_d = T::zero();
                        let mut sum_dx_hat = T::zero();
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                let g = grad.data()[j];
                                let xhat = (x.data()[j] - mu) * istd;
                                sum_d += g;
                                sum_dx_hat += g * xhat;
                            }
                        }
                        d_shift.data_mut()[ch] = sum_d;
                        d_scale.data_mut()[ch] = sum_dx_hat;
                        let coef = sc[ch] * istd;
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                let g = grad.data()[j];
                                let xhat = (x.data()[j] - mu) * istd;
                                dx.data_mut()[j] =
                                    coef * (g - sum_d / m - xhat * sum_dx_hat / m);
                            }
                        }
                    }
                    self.accumulate(input, &dx)?;
                    self.accumulate(scale, &d_scale)?;
                    self.accumulate(shift, &d_shift)?;
                }
                Op::BatchNormEval { input, scale, shift, mean, inv_std } => {
                    let (input, scale, shift) = (*input, *scale, *shift);
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let x = self.value(input);
                    let (n, c, h, w) = x.dims4()?;
                    let hw = h * w;
                    let sc = self.value(scale).data().to_vec();
                    let mut d_scale = Tensor::zeros(vec![c]);
                    let mut d_shift = Tensor::zeros(vec![c]);
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    for ch in 0..c {
                        let a = sc[ch] * inv_std[ch];
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                let g = grad.data()[j];
                                dx.data_mut()[j] = g * a;
                                d_scale.data_mut()[ch] += g * (x.data()[j] - mean[ch]) * inv_std[ch];
                                d_shift.data_mut()[ch] += g;
                            }
                        }
                    }
                    self.accumulate(input, &dx)?;
                    self.accumulate(scale, &d_scale)?;
                    self.accumulate(shift, &d_shift)?;
                }
                Op::Sum(a) => {
                    let a = *a;
                    let g = grad.data()[0];
                    let d = Tensor::full(self.value(a).shape().to_vec(), g);
                    self.accumulate(a, &d)?;
                }
                Op::Abs(a) => {
                    let a = *a;
                    let x = self.value(a);
                    let mut d = grad.clone();
                    for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv < T::zero() {
                            *g = -*g;
                        } else if xv == T::zero() {
                            *g = T::zero();
                        }
                    }
                    self.accumulate(a, &d)?;
                }
                Op::CrossEntropyMean { logits, labels, probs } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let (n, k) = probs.dims2()?;
                    let g = grad.data()[0] / T::from_f64(n as f64);
                    let mut d = probs.scale(g);
                    for (i, &y) in labels.iter().enumerate() {
                        d.data_mut()[i * k + y] -= g;
                    }
                    self.accumulate(logits, &d)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient() {
        // loss = sum(2 * w), w scalar -> w.grad = 2
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let two = tape.scale(w, 2.0);
        let loss = tape.sum(two);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0]);
    }

    #[test]
    fn square_loss_gradient() {
        // loss = sum(w^2) at w=3 -> grad 6
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn reuse_sums_both_paths() {
        // loss = sum(w*w) + sum(2*w): dl/dw = 2w + 2 = 8 at w=3
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(w, w).unwrap();
        let lin = tape.scale(w, 2.0);
        let s1 = tape.sum(sq);
        let s2 = tape.sum(lin);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(1.0), true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn forward_independent_of_requires_grad() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.5, 2.0]).unwrap();
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let a = t1.leaf(x.clone(), true);
        let b = t2.leaf(x, false);
        let ra = t1.leaky_relu1(a, 0.01);
        let rb = t2.leaky_relu1(b, 0.01);
        assert_eq!(t1.value(ra).data(), t2.value(rb).data());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![4, 10]), true);
        let loss = tape.cross_entropy_mean(logits, &[0, 3, 5, 9]).unwrap();
        let want = (10.0f64).ln();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 3]), true);
        assert!(matches!(
            tape.cross_entropy_mean(logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}
