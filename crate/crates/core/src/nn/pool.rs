use super::tensor::{Scalar, Tensor};
use super::{NnError, Result};

/// Flat input index of the maximum of every 2x2 window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// 2x2 stride-2 max pooling.
///
/// Odd heights/widths behave as if the last row/column were replicated, so
/// the output is `ceil(h/2) x ceil(w/2)`. Ties go to the first window element
/// in row-major order.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(NnError::Shape(format!("cannot pool an empty tensor {:?}", input.shape())));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&input.like_shape(n, c, oh, ow));
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    let y = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            let r0 = 2 * i;
            let r1 = (2 * i + 1).min(h - 1);
            for j in 0..ow {
                let c0 = 2 * j;
                let c1 = (2 * j + 1).min(w - 1);
                let cand = [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1];
                let mut best = cand[0];
                for &idx in &cand[1..] {
                    if x[base + idx] > x[base + best] {
                        best = idx;
                    }
                }
                y[o] = x[base + best];
                argmax.push(base + best);
                o += 1;
            }
        }
    }
    Ok((out, PoolIndices { input_shape: input.shape().to_vec(), argmax }))
}

/// Routes each output gradient to the input position that won its window.
pub fn maxpool2x2_backward<T: Scalar>(grad_out: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.len() != idx.argmax.len() {
        return Err(NnError::Shape(format!(
            "pool gradient {:?} does not match recorded window count {}",
            grad_out.shape(),
            idx.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&idx.input_shape);
    let d = dx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(&idx.argmax) {
        d[i] += g;
    }
    Ok(dx)
}
