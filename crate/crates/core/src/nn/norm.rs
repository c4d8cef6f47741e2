use super::tensor::{Scalar, Tensor};
use super::{NnError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel affine parameters and running statistics of one batch-norm
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values kept from a training-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T = f32> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

fn check<T: Scalar>(input: &Tensor<T>, bn: &BatchNorm<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if c != bn.channels() || bn.beta.len() != c {
        return Err(NnError::Shape(format!(
            "batch norm over {} channels applied to {:?}",
            bn.channels(),
            input.shape()
        )));
    }
    if n * h * w == 0 {
        return Err(NnError::Shape(format!(
            "batch norm needs a non-empty channel, got {:?}",
            input.shape()
        )));
    }
    Ok((n, c, h * w))
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates (unbiased variance, momentum 0.1). Infer mode applies
/// the running statistics and returns no cache.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    bn: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    let (n, c, hw) = check(input, bn)?;
    let mut out = Tensor::zeros(input.shape());
    let x = input.data();
    match mode {
        Mode::Infer => {
            let scales = infer_affine(bn);
            let y = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let (s, t) = scales[ch];
                    let off = (b * c + ch) * hw;
                    for (yv, &xv) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                        *yv = xv * s + t;
                    }
                }
            }
            Ok((out, None))
        }
        Mode::Train => {
            let count = (n * hw) as f64;
            let mut x_hat = Tensor::zeros(input.shape());
            let mut inv_std = Vec::with_capacity(c);
            for ch in 0..c {
                let mut sum = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    sum += x[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    sq += x[off..off + hw].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / count;
                let istd = 1.0 / (var + BN_EPS).sqrt();
                let (m_t, istd_t) = (T::from_f64(mean), T::from_f64(istd));
                let (g, be) = (bn.gamma.data()[ch], bn.beta.data()[ch]);
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    let xs = &x[off..off + hw];
                    let xh = &mut x_hat.data_mut()[off..off + hw];
                    for (h, &v) in xh.iter_mut().zip(xs) {
                        *h = (v - m_t) * istd_t;
                    }
                    let ys = &mut out.data_mut()[off..off + hw];
                    for (yv, &h) in ys.iter_mut().zip(&x_hat.data()[off..off + hw]) {
                        *yv = g * h + be;
                    }
                }
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                let mom = BN_MOMENTUM;
                bn.running_mean[ch] =
                    T::from_f64((1.0 - mom) * bn.running_mean[ch].as_f64() + mom * mean);
                bn.running_var[ch] =
                    T::from_f64((1.0 - mom) * bn.running_var[ch].as_f64() + mom * unbiased);
                inv_std.push(istd_t);
            }
            Ok((out, Some(BnCache { x_hat, inv_std })))
        }
    }
}

/// Inference-mode batch norm folded into `y = x * scale + shift` per channel.
pub fn infer_affine<T: Scalar>(bn: &BatchNorm<T>) -> Vec<(T, T)> {
    (0..bn.channels())
        .map(|ch| {
            let istd = 1.0 / (bn.running_var[ch].as_f64() + BN_EPS).sqrt();
            let s = bn.gamma.data()[ch].as_f64() * istd;
            let t = bn.beta.data()[ch].as_f64() - bn.running_mean[ch].as_f64() * s;
            (T::from_f64(s), T::from_f64(t))
        })
        .collect()
}

/// Gradients of a training-mode [`batchnorm2d`]: `(d_input, d_gamma, d_beta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    bn: &BatchNorm<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, hw) = check(grad_out, bn)?;
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(NnError::Shape(format!(
            "batch norm gradient {:?} does not match cached activation {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let count = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = cache.x_hat.data();
    let mut dx = Tensor::zeros(grad_out.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for (&g, &h) in dy[off..off + hw].iter().zip(&xh[off..off + hw]) {
                sdy += g.as_f64();
                sdyx += g.as_f64() * h.as_f64();
            }
        }
        dgamma.data_mut()[ch] = T::from_f64(sdyx);
        dbeta.data_mut()[ch] = T::from_f64(sdy);
        let k = bn.gamma.data()[ch].as_f64() * cache.inv_std[ch].as_f64() / count;
        let (kt, mdy, mdyx) = (T::from_f64(k), T::from_f64(sdy), T::from_f64(sdyx));
        let cnt = T::from_f64(count);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            let d = &mut dx.data_mut()[off..off + hw];
            for ((o, &g), &h) in d.iter_mut().zip(&dy[off..off + hw]).zip(&xh[off..off + hw]) {
                *o = kt * (cnt * g - mdy - h * mdyx);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
