//! Central finite-difference checks of every kernel's analytic gradients,
//! plus brute-force forward oracles for the convolution family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcr_core::nn::*;

mod common;
use common::{check, numeric_grad, rand_tensor, shapes};

/// Direct nested-loop same-padding convolution.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; n * co * h * wd];
    for bi in 0..n {
        for o in 0..co {
            for yy in 0..h {
                for xx in 0..wd {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = yy as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((o * c + ci) * k + ky) * k + kx]
                                    * x.data()[((bi * c + ci) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((bi * co + o) * h + yy) * wd + xx] = s;
                }
            }
        }
    }
    let shape = if x.shape().len() == 3 { vec![co, h, wd] } else { vec![n, co, h, wd] };
    Tensor::from_vec(&shape, out).unwrap()
}

/// Nested-loop 2x2 stride-2 convolution with weights `(in_y, in_x, 2, 2)`
/// indexed as the transposed conv stores them; used as the adjoint partner.
fn strided_conv_oracle(y: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (cx, cy) = (w.shape()[0], w.shape()[1]);
    let (_, _, h2, w2) = y.dims4().unwrap();
    let (h, wd) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; cx * h * wd];
    for c in 0..cx {
        for i in 0..h {
            for j in 0..wd {
                let mut s = 0.0;
                for o in 0..cy {
                    for a in 0..2 {
                        for b in 0..2 {
                            s += w.data()[((c * cy + o) * 2 + a) * 2 + b]
                                * y.data()[(o * h2 + 2 * i + a) * w2 + 2 * j + b];
                        }
                    }
                }
                out[(c * h + i) * wd + j] = s;
            }
        }
    }
    Tensor::from_vec(&[cx, h, wd], out).unwrap()
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let w = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let got = conv2d(&x, &w, &[0.25]).unwrap();
    let want = conv_oracle(&x, &w, &[0.25]);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // batched, multi-channel, 5x5 kernel
    let x = rand_tensor(&mut rng, &[2, 3, 6, 7]);
    let w = rand_tensor(&mut rng, &[4, 3, 5, 5]);
    let b = [0.1, -0.2, 0.3, 0.0];
    let got = conv2d(&x, &w, &b).unwrap();
    let want = conv_oracle(&x, &w, &b);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, &[2, 8, 8]);
        let w = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let y = rand_tensor(&mut rng, &[3, 16, 16]);
        // <convT(x), y> computed by the kernel under test
        let tx = transposed_conv2d(&x, &w, &[0.0; 3]).unwrap();
        let lhs = tx.dot(&y);
        // <x, conv(y)> computed by the nested-loop oracle
        let rhs = x.dot(&strided_conv_oracle(&y, &w));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn maxpool_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 6, 6]);
    let (y, _) = maxpool2x2(&x).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let mut m = f64::NEG_INFINITY;
            for a in 0..2 {
                for b in 0..2 {
                    m = m.max(x.data()[(2 * i + a) * 6 + 2 * j + b]);
                }
            }
            assert_eq!(y.data()[i * 3 + j], m);
        }
    }
}

#[test]
fn batchnorm_matches_direct_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 4, 5, 2]);
    let mut bn = BatchNorm::<f64>::new(4);
    for c in 0..4 {
        bn.gamma.data_mut()[c] = 0.5 + c as f64;
        bn.beta.data_mut()[c] = -1.0 + c as f64 * 0.3;
    }
    let (y, _) = batchnorm2d(&x, &mut bn.clone(), Mode::Train).unwrap();
    for c in 0..4 {
        let vals: Vec<f64> = (0..3).flat_map(|n| x.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for n in 0..3 {
            for (yv, xv) in y.plane(n, c).iter().zip(x.plane(n, c)) {
                let want = bn.gamma.data()[c] * (xv - mean) / (var + 1e-5).sqrt() + bn.beta.data()[c];
                assert!((yv - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for [n, c, h, w] in shapes(&mut rng, 20) {
        let co = rng.random_range(1..=3);
        let k = if rng.random_bool(0.3) { 1 } else { 3 };
        let x = rand_tensor(&mut rng, &[n, c, h, w]);
        let wt = rand_tensor(&mut rng, &[co, c, k, k]);
        let b: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rand_tensor(&mut rng, &[n, co, h, w]);
        let grads = conv2d_backward(&x, &wt, &r).unwrap();
        let num_x = numeric_grad(&x, |p| conv2d(p, &wt, &b).unwrap().dot(&r));
        check("conv2d input", &grads.input, &num_x);
        let num_w = numeric_grad(&wt, |p| conv2d(&x, p, &b).unwrap().dot(&r));
        check("conv2d weight", &grads.weight, &num_w);
        let bt = Tensor::from_vec(&[co], b.clone()).unwrap();
        let num_b = numeric_grad(&bt, |p| conv2d(&x, &wt, p.data()).unwrap().dot(&r));
        check("conv2d bias", &grads.bias, &num_b);
    }
}

#[test]
fn transposed_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for [n, c, h, w] in shapes(&mut rng, 20) {
        let co = rng.random_range(1..=3);
        let x = rand_tensor(&mut rng, &[n, c, h, w]);
        let wt = rand_tensor(&mut rng, &[c, co, 2, 2]);
        let b: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rand_tensor(&mut rng, &[n, co, 2 * h, 2 * w]);
        let grads = transposed_conv2d_backward(&x, &wt, &r).unwrap();
        let num_x = numeric_grad(&x, |p| transposed_conv2d(p, &wt, &b).unwrap().dot(&r));
        check("tconv input", &grads.input, &num_x);
        let num_w = numeric_grad(&wt, |p| transposed_conv2d(&x, p, &b).unwrap().dot(&r));
        check("tconv weight", &grads.weight, &num_w);
        let bt = Tensor::from_vec(&[co], b.clone()).unwrap();
        let num_b = numeric_grad(&bt, |p| transposed_conv2d(&x, &wt, p.data()).unwrap().dot(&r));
        check("tconv bias", &grads.bias, &num_b);
    }
}

#[test]
fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for [n, c, h, w] in shapes(&mut rng, 20) {
        // distinct values spaced far beyond the probe step so no window ties
        let len = n * c * h * w;
        let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
        for i in (1..len).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::from_vec(&[n, c, h, w], vals).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let dx = maxpool2x2_backward(&r, &idx).unwrap();
        let num = numeric_grad(&x, |p| maxpool2x2(p).unwrap().0.dot(&r));
        check("maxpool", &dx, &num);
    }
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for [n, c, h, w] in shapes(&mut rng, 20) {
        let x = rand_tensor(&mut rng, &[n, c, h, w]);
        let mut bn = BatchNorm::<f64>::new(c);
        bn.gamma = rand_tensor(&mut rng, &[c]);
        bn.beta = rand_tensor(&mut rng, &[c]);
        let r = rand_tensor(&mut rng, &[n, c, h, w]);
        let (_, cache) = batchnorm2d(&x, &mut bn.clone(), Mode::Train).unwrap();
        let (dx, dg, db) = batchnorm2d_backward(&r, &bn, &cache.unwrap()).unwrap();
        let f = |xx: &Tensor<f64>, b: &BatchNorm<f64>| {
            batchnorm2d(xx, &mut b.clone(), Mode::Train).unwrap().0.dot(&r)
        };
        check("bn input", &dx, &numeric_grad(&x, |p| f(p, &bn)));
        let num_g = numeric_grad(&bn.gamma, |p| {
            let mut b = bn.clone();
            b.gamma = p.clone();
            f(&x, &b)
        });
        check("bn gamma", &dg, &num_g);
        let num_b = numeric_grad(&bn.beta, |p| {
            let mut b = bn.clone();
            b.beta = p.clone();
            f(&x, &b)
        });
        check("bn beta", &db, &num_b);
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for [n, c, h, w] in shapes(&mut rng, 20) {
        let x = rand_tensor(&mut rng, &[n, c, h, w]);
        let r = rand_tensor(&mut rng, &[n, c, h, w]);
        let g = relu_backward(&x, &r).unwrap();
        check("relu", &g, &numeric_grad(&x, |p| relu(p).dot(&r)));
        let s = sigmoid(&x);
        let g = sigmoid_backward(&s, &r).unwrap();
        check("sigmoid", &g, &numeric_grad(&x, |p| sigmoid(p).dot(&r)));

        let c2 = rng.random_range(1..=3);
        let other = rand_tensor(&mut rng, &[n, c2, h, w]);
        let rc = rand_tensor(&mut rng, &[n, c + c2, h, w]);
        let (ga, gb) = split_channels(&rc, c).unwrap();
        check("concat first", &ga, &numeric_grad(&x, |p| concat_channels(p, &other).unwrap().dot(&rc)));
        check("concat second", &gb, &numeric_grad(&other, |p| concat_channels(&x, p).unwrap().dot(&rc)));
    }
}

#[test]
fn bce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for [n, c, h, w] in shapes(&mut rng, 20) {
        let x = rand_tensor(&mut rng, &[n, c, h, w]).map(|v| v * 4.0);
        let y = rand_tensor(&mut rng, &[n, c, h, w]).map(|v| (v + 1.0) / 2.0);
        let (_, g) = bce_with_sigmoid(&x, &y).unwrap();
        check("bce", &g, &numeric_grad(&x, |p| bce_with_sigmoid(p, &y).unwrap().0));
    }
}
