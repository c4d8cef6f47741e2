//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcr_core::annotations::{CellClass, PointAnnotation, Rect};
use tcr_core::eval::{evaluate, threshold_grid, Candidate, EvalRoi, ScoresSer};
use tcr_core::nn::Tensor;
use tcr_core::postprocess::Thresholds;

pub const MPP: f64 = 1.0 / 4.4;
pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Per-element relative error with a small floor for near-zero gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Numeric gradient of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let up = f(&probe);
            probe.data_mut()[i] = orig - H;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub fn check(name: &str, analytic: &Tensor<f64>, numeric: &[f64]) {
    let err = max_rel_err(analytic.data(), numeric);
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

/// Random shapes `(n, c, h, w)` for the finite-difference sweeps.
pub fn shapes(rng: &mut ChaCha8Rng, count: usize) -> Vec<[usize; 4]> {
    (0..count)
        .map(|_| {
            [
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(2..=6),
                rng.random_range(2..=6),
            ]
        })
        .collect()
}

/// Closest-first greedy written as repeated global minimum search.
pub fn brute_match(dets: &[(f64, f64)], labels: &[(f64, f64)], r: f64) -> Vec<(usize, usize)> {
    let mut dused = vec![false; dets.len()];
    let mut lused = vec![false; labels.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, d) in dets.iter().enumerate() {
            for (j, l) in labels.iter().enumerate() {
                if dused[i] || lused[j] {
                    continue;
                }
                let dist = ((d.0 - l.0).powi(2) + (d.1 - l.1).powi(2)).sqrt();
                if dist > r {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => (dist, i, j) < (bd, bi, bj),
                };
                if better {
                    best = Some((dist, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        dused[i] = true;
        lused[j] = true;
        out.push((i, j));
    }
    out
}

pub fn cand(x: u64, y: u64, i_d: f64, i_c: f64) -> Candidate {
    Candidate { x, y, scores: ScoresSer { i_d, i_c, i_s: i_c } }
}

/// ROIs where labeled cells carry `i_d` in [0.9, 1] and spurious peaks sit
/// at or below 0.3. Tumor cells have fused scores in [0.6, 1], normal ones
/// in [0, 0.5].
pub fn separated_rois(seed: u64, n: usize) -> Vec<EvalRoi> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let share = rng.random::<f64>();
            let mut candidates = Vec::new();
            let mut labels = Vec::new();
            for i in 0..30u64 {
                let (x, y) = (20 + (i % 6) * 40, 20 + (i / 6) * 40);
                let tumor = rng.random::<f64>() < share;
                let i_c = if tumor { rng.random_range(0.6..=1.0) } else { rng.random_range(0.0..=0.5) };
                candidates.push(cand(x + 1, y, rng.random_range(0.9..=1.0), i_c));
                labels.push(PointAnnotation {
                    x: x as f64,
                    y: y as f64,
                    class: if tumor { CellClass::Tumor } else { CellClass::Normal },
                });
                if i == 0 || rng.random::<f64>() < 0.3 {
                    let i_d = if i == 0 { 0.3 } else { rng.random_range(0.0..=0.3) };
                    candidates.push(cand(x + 20, y + 20, i_d, rng.random::<f64>()));
                }
            }
            EvalRoi { roi: Rect::new(k as u64 * 300, 0, 300, 300), mpp: MPP, candidates, labels }
        })
        .collect()
}

/// Exhaustive oracle through `evaluate` at every grid point.
pub fn grid_oracle(rois: &[EvalRoi], step: f64) -> Thresholds {
    let grid = threshold_grid(step).unwrap();
    let mut best_d = (grid[0], f64::NEG_INFINITY);
    for &t in &grid {
        let f1 = evaluate(rois, &Thresholds { t_d: t, t_c: 0.5, alpha: 0.5 }).unwrap().detection.f1;
        if f1 > best_d.1 {
            best_d = (t, f1);
        }
    }
    let mut best_c = (grid[0], f64::INFINITY);
    for &t in &grid {
        let e = evaluate(rois, &Thresholds { t_d: best_d.0, t_c: t, alpha: 0.5 }).unwrap().tcr_error;
        if e < best_c.1 {
            best_c = (t, e);
        }
    }
    Thresholds { t_d: best_d.0, t_c: best_c.0, alpha: 0.5 }
}

