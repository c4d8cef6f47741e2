use super::tensor::{Scalar, Tensor};
use super::{NnError, Result};

/// Moment estimates for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`, with β1=0.9, β2=0.999, ε=1e-8.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { second: first.clone(), first, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(NnError::LearningRate(lr));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(NnError::Shape(format!(
            "adam got {} params, {} grads and {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(NnError::Shape(format!(
                "adam slot {i}: param {:?}, grad {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.first[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (ib1, ib2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step_size = T::from_f64(lr / c1);
    let inv_sqrt_c2 = T::from_f64(1.0 / c2.sqrt());
    let eps = T::from_f64(state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1t * *mv + ib1 * gv;
            *vv = b2t * *vv + ib2 * gv * gv;
            *pv -= step_size * *mv / ((*vv).sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 1e-3;
        let mut p = Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.3f64, -7.0, 2e-3]).unwrap();
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, lr).unwrap();
        let expect = [1.0 - lr, -2.0 + lr, 0.5 - lr];
        for (a, b) in p.data().iter().zip(expect) {
            // eps shifts the smallest gradient by ~5e-6 relative
            assert!((a - b).abs() < 1e-5 * lr, "{a} vs {b}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(&[2], vec![0.25f32, -4.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = Tensor::<f32>::zeros(&[1]);
        let g = Tensor::zeros(&[1]);
        let mut st = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut st, 0.0).is_err());
        assert!(adam_step(&mut [&mut p], &[&g], &mut st, -1.0).is_err());
        assert_eq!(st.step, 0);
    }
}
