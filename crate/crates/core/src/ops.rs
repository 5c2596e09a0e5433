//! Layer primitives: convolution, batch normalization, pooling, fully-connected,
//! ReLU. Forward kernels here are pure and shared by the autograd tape and the
//! structural-skipping inference executor.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2-D convolution parameters. Weight layout (out_c, in_c, kh, kw).
/// Cross-correlation convention, no kernel flip.
#[derive(Debug, Clone)]
pub struct Conv2dParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        if weight.shape().len() != 4 {
            return Err(Error::RankMismatch {
                expected: 4,
                shape: weight.shape().to_vec(),
            });
        }
        if weight.shape().iter().any(|&e| e == 0) || stride == 0 {
            return Err(Error::Config {
                field: "conv".into(),
                reason: "zero extent or stride".into(),
            });
        }
        if let Some(b) = &bias {
            if b.numel() != weight.shape()[0] {
                return Err(Error::ShapeMismatch {
                    left: b.shape().to_vec(),
                    right: vec![weight.shape()[0]],
                });
            }
        }
        Ok(Conv2dParams { weight, bias, stride, padding })
    }

    /// Kaiming fan-in init: std = sqrt(2 / (in_c * kh * kw)).
    pub fn kaiming(
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * kh * kw;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<T> = (0..out_c * fan_in)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        let weight = Tensor::new(vec![out_c, in_c, kh, kw], data).unwrap();
        let bias = with_bias.then(|| Tensor::zeros(vec![out_c]));
        Conv2dParams { weight, bias, stride, padding }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

/// Per-channel batch normalization parameters plus running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            scale: Tensor::full(vec![channels], T::one()),
            shift: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }
}

/// Fully-connected layer: y = W x + b, weight layout (out, in).
#[derive(Debug, Clone)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _inp) = weight.dims2()?;
        if bias.numel() != out {
            return Err(Error::ShapeMismatch {
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn kaiming(in_size: usize, out_size: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_size as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<T> = (0..out_size * in_size)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        LinearParams {
            weight: Tensor::new(vec![out_size, in_size], data).unwrap(),
            bias: Tensor::zeros(vec![out_size]),
        }
    }

    pub fn out_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_size(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Output spatial extents: floor((H + 2*pad - kH)/stride) + 1, per axis.
pub fn conv_out_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kh || wp < kw {
        return Err(Error::DegenerateConvOutput { h, w, kh, kw, stride, padding });
    }
    Ok(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

/// Lower one instance (C,H,W slice) into a column matrix with one row per
/// (channel, ky, kx) and one column per output pixel. `channels` selects the
/// input-channel subset; row order follows `channels` order.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    channels: &[usize],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let zero = T::zero();
    let mut row = 0usize;
    for &c in channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let out_row = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let mut idx = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        out_row[idx..idx + ow].iter_mut().for_each(|v| *v = zero);
                        idx += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        out_row[idx] = if ix < 0 || ix >= w as isize {
                            zero
                        } else {
                            plane[base + ix as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a column matrix back onto an input instance (inverse of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im_accumulate<T: Scalar>(
    cols: &[T],
    channels: &[usize],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let mut row = 0usize;
    for &c in channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let col_row = &cols[row * oh * ow..(row + 1) * oh * ow];
                let mut idx = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += col_row[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_conv_input<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if c != p.in_channels() {
        return Err(Error::ChannelMismatch {
            input: c,
            expected: p.in_channels(),
        });
    }
    Ok((n, c, h, w, p.out_channels()))
}

/// Dense convolution over a batch.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    conv2d_forward_masked(x, p, None, None).map(|(out, _)| out)
}

/// Convolution restricted to subsets of input/output channels. Inactive output
/// channels are left exactly zero; inactive input channels contribute nothing.
/// Returns the output and the number of multiply-accumulates performed.
pub fn conv2d_forward_masked<T: Scalar>(
    x: &Tensor<T>,
    p: &Conv2dParams<T>,
    active_in: Option<&[usize]>,
    active_out: Option<&[usize]>,
) -> Result<(Tensor<T>, u64)> {
    let (n, c_in, h, w, c_out) = check_conv_input(x, p)?;
    let (kh, kw) = p.kernel();
    let (oh, ow) = conv_out_hw(h, w, kh, kw, p.stride, p.padding)?;

    let full_in: Vec<usize> = (0..c_in).collect();
    let full_out: Vec<usize> = (0..c_out).collect();
    let in_ch = active_in.unwrap_or(&full_in);
    let out_ch = active_out.unwrap_or(&full_out);

    let a_in = in_ch.len();
    let a_out = out_ch.len();
    let kk = kh * kw;
    let ohw = oh * ow;
    let mut out = Tensor::zeros(vec![n, c_out, oh, ow]);

    if a_in == 0 || a_out == 0 {
        // nothing to compute; bias still applies to active output channels
        if let Some(b) = &p.bias {
            for i in 0..n {
                for &oc in out_ch {
                    let base = (i * c_out + oc) * ohw;
                    let bv = b.data()[oc];
                    out.data_mut()[base..base + ohw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        return Ok((out, 0));
    }

    // gather the weight sub-matrix (a_out x a_in*kk); reuse full weight when unmasked
    let w_full = p.weight.data();
    let gathered: Option<Vec<T>> = if a_in == c_in && a_out == c_out {
        None
    } else {
        let mut g = Vec::with_capacity(a_out * a_in * kk);
        for &oc in out_ch {
            for &ic in in_ch {
                let base = (oc * c_in + ic) * kk;
                g.extend_from_slice(&w_full[base..base + kk]);
            }
        }
        Some(g)
    };
    let wmat: &[T] = gathered.as_deref().unwrap_or(w_full);

    let mut cols = vec![T::zero(); a_in * kk * ohw];
    let mut prod = vec![T::zero(); a_out * ohw];
    let chw = c_in * h * w;
    for i in 0..n {
        let xi = &x.data()[i * chw..(i + 1) * chw];
        im2col(xi, in_ch, h, w, kh, kw, p.stride, p.padding, oh, ow, &mut cols);
        T::gemm(a_out, a_in * kk, ohw, T::one(), wmat, &cols, T::zero(), &mut prod);
        let out_data = out.data_mut();
        for (r, &oc) in out_ch.iter().enumerate() {
            let dst = (i * c_out + oc) * ohw;
            let bv = p.bias.as_ref().map(|b| b.data()[oc]);
            let src = &prod[r * ohw..(r + 1) * ohw];
            match bv {
                Some(b) => {
                    for (d, &s) in out_data[dst..dst + ohw].iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
                None => out_data[dst..dst + ohw].copy_from_slice(src),
            }
        }
    }
    let macs = (n * a_out * a_in * kk * ohw) as u64;
    Ok((out, macs))
}

/// Gradients of dense convolution: (d_input, d_weight, d_bias).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &Conv2dParams<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, c_in, h, w, c_out) = check_conv_input(x, p)?;
    let (kh, kw) = p.kernel();
    let (oh, ow) = conv_out_hw(h, w, kh, kw, p.stride, p.padding)?;
    let kk = kh * kw;
    let ohw = oh * ow;
    let ickk = c_in * kk;
    let full_in: Vec<usize> = (0..c_in).collect();

    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(p.weight.shape().to_vec());
    let mut db = p.bias.as_ref().map(|_| Tensor::zeros(vec![c_out]));

    let mut cols = vec![T::zero(); ickk * ohw];
    let mut dcols = vec![T::zero(); ickk * ohw];
    let chw = c_in * h * w;
    for i in 0..n {
        let xi = &x.data()[i * chw..(i + 1) * chw];
        let doi = &d_out.data()[i * c_out * ohw..(i + 1) * c_out * ohw];
        im2col(xi, &full_in, h, w, kh, kw, p.stride, p.padding, oh, ow, &mut cols);
        // dW += dOut_i (c_out x ohw) * cols^T
        T::gemm_nt(c_out, ohw, ickk, T::one(), doi, &cols, T::one(), dw.data_mut());
        // dCols = W^T * dOut_i
        T::gemm_tn(ickk, c_out, ohw, T::one(), p.weight.data(), doi, T::zero(), &mut dcols);
        col2im_accumulate(
            &dcols,
            &full_in,
            h,
            w,
            kh,
            kw,
            p.stride,
            p.padding,
            oh,
            ow,
            &mut dx.data_mut()[i * chw..(i + 1) * chw],
        );
        if let Some(db) = db.as_mut() {
            for oc in 0..c_out {
                let s: T = doi[oc * ohw..(oc + 1) * ohw].iter().copied().sum();
                db.data_mut()[oc] += s;
            }
        }
    }
    Ok((dx, dw, db))
}

/// Affine map over the last axis of a (N, in) tensor: y = x W^T + b.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let (n, inp) = x.dims2()?;
    if inp != p.in_size() {
        return Err(Error::ShapeMismatch {
            left: x.shape().to_vec(),
            right: p.weight.shape().to_vec(),
        });
    }
    let out = p.out_size();
    let mut y = Tensor::zeros(vec![n, out]);
    T::gemm_nt(n, inp, out, T::one(), x.data(), p.weight.data(), T::zero(), y.data_mut());
    for i in 0..n {
        for (o, &b) in p.bias.data().iter().enumerate() {
            y.data_mut()[i * out + o] += b;
        }
    }
    Ok(y)
}

/// Gradients of linear: (d_input, d_weight, d_bias).
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &LinearParams<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, inp) = x.dims2()?;
    let out = p.out_size();
    let mut dx = Tensor::zeros(vec![n, inp]);
    let mut dw = Tensor::zeros(vec![out, inp]);
    let mut db = Tensor::zeros(vec![out]);
    T::gemm(n, out, inp, T::one(), d_out.data(), p.weight.data(), T::zero(), dx.data_mut());
    T::gemm_tn(out, n, inp, T::one(), d_out.data(), x.data(), T::zero(), dw.data_mut());
    for i in 0..n {
        for o in 0..out {
            db.data_mut()[o] += d_out.data()[i * out + o];
        }
    }
    Ok((dx, dw, db))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Mean over the two spatial axes: (N,C,H,W) -> (N,C).
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let mut out = Tensor::zeros(vec![n, c]);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let s: T = x.data()[base..base + hw].iter().copied().sum();
            out.data_mut()[i * c + ch] = s * inv;
        }
    }
    Ok(out)
}

/// Eval-mode batch norm: deterministic per-channel affine using running stats.
/// When `active` is given, only those channels are touched; the rest of the
/// output stays exactly zero (the skipping executor relies on this).
pub fn batch_norm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    active: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c != p.channels() {
        return Err(Error::ChannelMismatch {
            input: c,
            expected: p.channels(),
        });
    }
    let hw = h * w;
    let full: Vec<usize> = (0..c).collect();
    let chans = active.unwrap_or(&full);
    let eps = T::from_f64(p.epsilon);
    let mut out = if active.is_some() {
        Tensor::zeros(x.shape().to_vec())
    } else {
        x.clone()
    };
    for i in 0..n {
        for &ch in chans {
            let inv_std = T::one() / (p.running_var.data()[ch] + eps).sqrt();
            let a = p.scale.data()[ch] * inv_std;
            let b = p.shift.data()[ch] - p.running_mean.data()[ch] * a;
            let base = (i * c + ch) * hw;
            let src = &x.data()[base..base + hw];
            let dst = &mut out.data_mut()[base..base + hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = a * s + b;
            }
        }
    }
    Ok(out)
}
