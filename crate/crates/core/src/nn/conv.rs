//! Stride-1 "same" convolution and the 2x2 stride-2 transposed convolution
//! used for decoder up-sampling.
//!
//! Both lower to GEMM. The same-padding convolution goes through an im2col
//! buffer built one band of output rows at a time, so memory stays bounded
//! for large inference tiles. The reduction order for any output pixel only
//! depends on the kernel, never on the image size or band split, which keeps
//! a tile's interior bit-identical to the same pixels of a larger image.

use super::tensor::{gemm, Scalar, Tensor};
use super::{LayerGrads, NnError, Result};

/// Upper bound on im2col buffer elements per band.
const BAND_ELEMS: usize = 1 << 21;

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<(usize, usize)> {
    let (_, c, _, _) = input.dims4()?;
    let [co, ci, kh, kw] = *weights.shape() else {
        return Err(NnError::Shape(format!(
            "conv2d weights must be (out,in,kh,kw), got {:?}",
            weights.shape()
        )));
    };
    if ci != c {
        return Err(NnError::Shape(format!(
            "conv2d weights {:?} expect {ci} input channels but input is {:?}",
            weights.shape(),
            input.shape()
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(NnError::Shape(format!(
            "conv2d needs a square odd kernel, got {:?}",
            weights.shape()
        )));
    }
    if bias.len() != co {
        return Err(NnError::Shape(format!(
            "conv2d bias has {} entries for weights {:?}",
            bias.len(),
            weights.shape()
        )));
    }
    Ok((co, kh))
}

fn band_rows(k_rows: usize, w: usize, h: usize) -> usize {
    (BAND_ELEMS / (k_rows * w).max(1)).clamp(1, h.max(1))
}

/// Unfold output rows `r0..r1` of one `(C,H,W)` sample into `col`
/// (`C*k*k` rows by `(r1-r0)*W` columns), zero outside the image.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    r0: usize,
    r1: usize,
    col: &mut [T],
) {
    let pad = (k / 2) as isize;
    let bw = (r1 - r0) * w;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * bw..(row + 1) * bw];
                let dx = kx as isize - pad;
                for y in r0..r1 {
                    let d = &mut dst[(y - r0) * w..(y - r0 + 1) * w];
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = dx.unsigned_abs().min(w);
                    let n = w - shift;
                    if dx >= 0 {
                        d[..n].copy_from_slice(&src[shift..]);
                        d[n..].fill(T::zero());
                    } else {
                        d[..shift].fill(T::zero());
                        d[shift..].copy_from_slice(&src[..n]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    r0: usize,
    r1: usize,
    dx: &mut [T],
) {
    let pad = (k / 2) as isize;
    let bw = (r1 - r0) * w;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * bw..(row + 1) * bw];
                let dxo = kx as isize - pad;
                for y in r0..r1 {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[(y - r0) * w..(y - r0 + 1) * w];
                    let d = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = dxo.unsigned_abs().min(w);
                    let n = w - shift;
                    if dxo >= 0 {
                        for (dv, &sv) in d[shift..].iter_mut().zip(&s[..n]) {
                            *dv += sv;
                        }
                    } else {
                        for (dv, &sv) in d[..n].iter_mut().zip(&s[shift..]) {
                            *dv += sv;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with zero "same" padding of `k/2` on every side.
///
/// `weights` is `(out_ch, in_ch, k, k)` with odd `k`; the output keeps the
/// input's spatial size and rank.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (co, k) = check_conv_shapes(input, weights, bias)?;
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let kk = c * k * k;
    let mut out = Tensor::zeros(&input.like_shape(n, co, h, w));
    let wdata = weights.data();
    let rows = band_rows(kk, w, h);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * rows * w] };
    for b in 0..n {
        let x = &input.data()[b * c * hw..(b + 1) * c * hw];
        let y = &mut out.data_mut()[b * co * hw..(b + 1) * co * hw];
        if k == 1 {
            gemm(co, c, hw, wdata, c, false, x, hw, false, T::zero(), y, hw);
        } else {
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + rows).min(h);
                let bw = (r1 - r0) * w;
                im2col(x, c, h, w, k, r0, r1, &mut col[..kk * bw]);
                gemm(co, kk, bw, wdata, kk, false, &col[..kk * bw], bw, false, T::zero(), &mut y[r0 * w..], hw);
                r0 = r1;
            }
        }
        for (plane, &bv) in y.chunks_exact_mut(hw).zip(bias) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] given the forward input and the output gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let co = weights.shape().first().copied().unwrap_or(0);
    let zero_bias = vec![T::zero(); co];
    let (co, k) = check_conv_shapes(input, weights, &zero_bias)?;
    let (n, c, h, w) = input.dims4()?;
    let (gn, gc, gh, gw) = grad_out.dims4()?;
    if (gn, gc, gh, gw) != (n, co, h, w) {
        return Err(NnError::Shape(format!(
            "conv2d output gradient {:?} does not match input {:?} and weights {:?}",
            grad_out.shape(),
            input.shape(),
            weights.shape()
        )));
    }
    let hw = h * w;
    let kk = c * k * k;
    let wdata = weights.data();
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = Tensor::zeros(input.shape());
    let rows = band_rows(kk, w, h);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * rows * w] };
    let mut dcol = if k == 1 { Vec::new() } else { vec![T::zero(); kk * rows * w] };
    for b in 0..n {
        let x = &input.data()[b * c * hw..(b + 1) * c * hw];
        let dy = &grad_out.data()[b * co * hw..(b + 1) * co * hw];
        let dxs = &mut dx.data_mut()[b * c * hw..(b + 1) * c * hw];
        if k == 1 {
            gemm(co, hw, c, dy, hw, false, x, hw, true, T::one(), dw.data_mut(), c);
            gemm(c, co, hw, wdata, c, true, dy, hw, false, T::zero(), dxs, hw);
        } else {
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + rows).min(h);
                let bw = (r1 - r0) * w;
                im2col(x, c, h, w, k, r0, r1, &mut col[..kk * bw]);
                let dyb = &dy[r0 * w..];
                gemm(co, bw, kk, dyb, hw, false, &col[..kk * bw], bw, true, T::one(), dw.data_mut(), kk);
                gemm(kk, co, bw, wdata, kk, true, dyb, hw, false, T::zero(), &mut dcol[..kk * bw], bw);
                col2im(&dcol[..kk * bw], c, h, w, k, r0, r1, dxs);
                r0 = r1;
            }
        }
        for (o, plane) in dy.chunks_exact(hw).enumerate() {
            let s: T = plane.iter().copied().sum();
            db.data_mut()[o] += s;
        }
    }
    Ok(LayerGrads { weight: dw, bias: db, input: dx })
}

fn check_tconv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias_len: usize,
) -> Result<usize> {
    let (_, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 || c == 0 {
        return Err(NnError::Shape(format!(
            "transposed conv input needs positive dims, got {:?}",
            input.shape()
        )));
    }
    let [ci, co, 2, 2] = *weights.shape() else {
        return Err(NnError::Shape(format!(
            "transposed conv weights must be (in,out,2,2), got {:?}",
            weights.shape()
        )));
    };
    if ci != c || co == 0 {
        return Err(NnError::Shape(format!(
            "transposed conv weights {:?} do not fit input {:?}",
            weights.shape(),
            input.shape()
        )));
    }
    if bias_len != co {
        return Err(NnError::Shape(format!(
            "transposed conv bias has {bias_len} entries for weights {:?}",
            weights.shape()
        )));
    }
    Ok(co)
}

/// 2x2 stride-2 transposed convolution (the adjoint of a 2x2 stride-2
/// convolution). `weights` is `(in_ch, out_ch, 2, 2)`; output spatial dims are
/// exactly twice the input's.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<Tensor<T>> {
    let co = check_tconv_shapes(input, weights, bias.len())?;
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&input.like_shape(n, co, oh, ow));
    let mut t = vec![T::zero(); co * 4 * hw];
    for b in 0..n {
        let x = &input.data()[b * c * hw..(b + 1) * c * hw];
        gemm(co * 4, c, hw, weights.data(), co * 4, true, x, hw, false, T::zero(), &mut t, hw);
        let y = &mut out.data_mut()[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            let plane = &mut y[o * oh * ow..(o + 1) * oh * ow];
            let bv = bias[o];
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &t[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let row = &mut plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for j in 0..w {
                            row[2 * j + bb] = src[i * w + j] + bv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`transposed_conv2d`].
pub fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let co = weights.shape().get(1).copied().unwrap_or(0);
    check_tconv_shapes(input, weights, co)?;
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.dims4()? != (n, co, oh, ow) {
        return Err(NnError::Shape(format!(
            "transposed conv output gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = Tensor::zeros(input.shape());
    let mut dt = vec![T::zero(); co * 4 * hw];
    for b in 0..n {
        let dy = &grad_out.data()[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            let plane = &dy[o * oh * ow..(o + 1) * oh * ow];
            db.data_mut()[o] += plane.iter().copied().sum();
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut dt[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let row = &plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for j in 0..w {
                            dst[i * w + j] = row[2 * j + bb];
                        }
                    }
                }
            }
        }
        let x = &input.data()[b * c * hw..(b + 1) * c * hw];
        gemm(c, co * 4, hw, weights.data(), co * 4, false, &dt, hw, false, T::zero(), &mut dx.data_mut()[b * c * hw..(b + 1) * c * hw], hw);
        gemm(c, hw, co * 4, x, hw, false, &dt, hw, true, T::one(), dw.data_mut(), co * 4);
    }
    Ok(LayerGrads { weight: dw, bias: db, input: dx })
}
