use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcr_core::annotations::CellClass;
use tcr_core::eval::{
    classification_metrics, detection_metrics, greedy_match, tcr_error, threshold_grid, tune_thresholds,
    MATCH_RADIUS_UM,
};
use tcr_core::postprocess::{classify, compute_tcr, detect_peaks, sample_scores, GeoMap, Peak, Scores, Thresholds};
use tcr_core::raster::DensityMap;

mod common;
use common::{brute_match, grid_oracle, separated_rois, MPP};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// Brute-force 3x3 window scan written from the rule: at or above `t_d`, no
/// in-bounds neighbor greater, and no earlier neighbor in scan order equal.
fn scan_peaks(map: &DensityMap, t_d: f64) -> Vec<(usize, usize)> {
    let (w, h) = (map.width as i64, map.height as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.get(x as usize, y as usize);
            if f64::from(v) < t_d {
                continue;
            }
            let window: Vec<(i64, i64)> =
                (y - 1..=y + 1).flat_map(|yy| (x - 1..=x + 1).map(move |xx| (xx, yy))).collect();
            let ok = window.iter().filter(|&&(xx, yy)| (xx, yy) != (x, y) && xx >= 0 && yy >= 0 && xx < w && yy < h).all(
                |&(xx, yy)| {
                    let n = map.get(xx as usize, yy as usize);
                    let earlier = yy * w + xx < y * w + x;
                    n < v || (n == v && !earlier)
                },
            );
            if ok {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

#[test]
fn peak_examples() {
    assert!(detect_peaks(&DensityMap::zeros(9, 7), 0.01).is_empty());
    let mut m = DensityMap::zeros(9, 7);
    m.set(4, 3, 1.0);
    let p = detect_peaks(&m, 0.5);
    assert_eq!(p, vec![Peak { x: 4, y: 3, value: 1.0 }]);
    let mut m = DensityMap::zeros(9, 7);
    m.set(4, 3, 0.9);
    m.set(5, 3, 0.9);
    assert_eq!(detect_peaks(&m, 0.5).iter().map(|p| (p.x, p.y)).collect::<Vec<_>>(), vec![(4, 3)]);
}

#[test]
fn bilinear_half_integer_is_the_mean() {
    let ramp = DensityMap::from_raw(2, 2, vec![0.1, 0.3, 0.5, 0.9]).unwrap();
    let (v, clamped) = ramp.bilinear(0.5, 0.5);
    assert!(!clamped);
    assert!((v - (0.1 + 0.3 + 0.5 + 0.9) / 4.0).abs() < 1e-7);
    let (v, _) = ramp.bilinear(0.5, 0.0);
    assert!((v - 0.2).abs() < 1e-7);
}

#[test]
fn constant_segmentation_map_gives_constant_i_s() {
    let c = DensityMap::filled(40, 40, 0.25);
    let s = DensityMap::filled(20, 20, 0.7);
    let peaks: Vec<Peak> = (0..10).map(|i| Peak { x: i * 4, y: 39 - i * 3, value: 1.0 }).collect();
    let (scores, _) = sample_scores(&peaks, &GeoMap::new(&c, (0, 0), 0.5), Some(&GeoMap::new(&s, (0, 0), 0.25)));
    assert!(scores.iter().all(|s| (s.i_s - 0.7).abs() < 1e-7 && (s.i_c - 0.25).abs() < 1e-7));
}

#[test]
fn classification_examples() {
    let th = Thresholds { t_d: 0.5, t_c: 0.5, alpha: 0.5 };
    let (class, score) = classify(&Scores { i_d: 1.0, i_c: 0.8, i_s: 0.4 }, &th);
    assert!(close(score, 0.6));
    assert_eq!(class, CellClass::Tumor);
    let (class, _) = classify(&Scores { i_d: 1.0, i_c: 0.5, i_s: 0.5 }, &th);
    assert_eq!(class, CellClass::Normal);
    let a1 = Thresholds { alpha: 1.0, ..th };
    for i_s in [0.0, 0.3, 1.0] {
        assert_eq!(classify(&Scores { i_d: 1.0, i_c: 0.7, i_s }, &a1).0, CellClass::Tumor);
        assert_eq!(classify(&Scores { i_d: 1.0, i_c: 0.2, i_s }, &a1).0, CellClass::Normal);
    }
    let tcr = compute_tcr(&[vec![CellClass::Tumor; 40], vec![CellClass::Normal; 120]].concat());
    assert!(close(tcr.tcr, 0.25));
    let empty = compute_tcr(&[]);
    assert!(empty.empty && empty.tcr == 0.0);
    assert_eq!(compute_tcr(&[CellClass::Tumor; 3]).tcr, 1.0);
}

#[test]
fn matching_examples() {
    let m = greedy_match(&[(110.0, 50.0)], &[(100.0, 50.0)], MATCH_RADIUS_UM, MPP).unwrap();
    assert_eq!(m.tp(), 1);
    let m = greedy_match(&[(120.0, 50.0)], &[(100.0, 50.0)], MATCH_RADIUS_UM, MPP).unwrap();
    assert_eq!((m.tp(), m.fp(), m.fn_()), (0, 1, 1));
    let m = greedy_match(&[(105.0, 50.0), (102.0, 50.0)], &[(100.0, 50.0)], MATCH_RADIUS_UM, MPP).unwrap();
    assert_eq!(m.pairs.len(), 1);
    assert_eq!((m.pairs[0].0, m.pairs[0].1), (1, 0));
    assert_eq!(m.unmatched_detections, vec![0]);
}

#[test]
fn matching_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = MATCH_RADIUS_UM / MPP;
    for case in 0..1000 {
        let nd = rng.random_range(0..=12);
        let nl = rng.random_range(0..=12);
        // a small field and integer coordinates give many near ties
        let side = rng.random_range(10.0..80.0f64);
        let mut pt = || ((rng.random::<f64>() * side).round(), (rng.random::<f64>() * side).round());
        let dets: Vec<(f64, f64)> = (0..nd).map(|_| pt()).collect();
        let labels: Vec<(f64, f64)> = (0..nl).map(|_| pt()).collect();
        let m = greedy_match(&dets, &labels, MATCH_RADIUS_UM, MPP).unwrap();
        let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.0, p.1)).collect();
        assert_eq!(got, brute_match(&dets, &labels, r), "case {case}");
        assert_eq!(m.tp() + m.fn_(), nl);
        assert_eq!(m.tp() + m.fp(), nd);
    }
}

#[test]
fn metric_examples() {
    let d = detection_metrics(8, 2, 1);
    assert!(close(d.accuracy, 8.0 / 11.0) && close(d.precision, 0.8) && close(d.recall, 8.0 / 9.0));
    assert!(close(d.f1, 2.0 * 0.8 * (8.0 / 9.0) / (0.8 + 8.0 / 9.0)));
    assert!((d.f1 - 0.8421).abs() < 1e-4);
    let p = detection_metrics(5, 0, 0);
    assert_eq!((p.accuracy, p.precision, p.recall, p.f1), (1.0, 1.0, 1.0, 1.0));
    let z = detection_metrics(0, 3, 4);
    assert_eq!((z.accuracy, z.precision, z.recall, z.f1), (0.0, 0.0, 0.0, 0.0));

    let c = classification_metrics(50, 40, 10, 0);
    assert!(close(c.accuracy, 0.9) && close(c.precision_pos, 5.0 / 6.0) && close(c.recall_pos, 1.0));
    assert!(close(c.precision_neg, 1.0) && close(c.recall_neg, 0.8));
    assert!(close(c.precision, 11.0 / 12.0) && close(c.recall, 0.9));
    let f1 = 2.0 * (11.0 / 12.0) * 0.9 / (11.0 / 12.0 + 0.9);
    assert!(close(c.f1, f1) && (c.f1 - 0.9082).abs() < 1e-4);
    let perfect = classification_metrics(7, 9, 0, 0);
    assert_eq!((perfect.accuracy, perfect.f1), (1.0, 1.0));
    let all_tumor = classification_metrics(7, 0, 9, 0);
    assert_eq!((all_tumor.recall_pos, all_tumor.recall_neg), (1.0, 0.0));

    assert!(close(tcr_error(&[0.30, 0.50], &[0.25, 0.40]).unwrap(), 0.075));
    assert_eq!(tcr_error(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
    assert_eq!(tcr_error(&[1.0], &[0.0]).unwrap(), 1.0);
}

#[test]
fn tuning_picks_the_separating_thresholds() {
    let rois = separated_rois(9, 6);
    let r = tune_thresholds(&rois, 0.05, 0.5).unwrap();
    assert_eq!(r.thresholds.t_d, 0.35);
    assert_eq!(r.detection_f1, 1.0);
    assert!((0.5..0.6).contains(&r.thresholds.t_c), "t_c {}", r.thresholds.t_c);
    assert_eq!(r.tcr_error, 0.0);
    assert_eq!(r.thresholds, grid_oracle(&rois, 0.05));
    let best = r.stage1.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best, r.detection_f1);
}

#[test]
fn coarse_grid_is_deterministic() {
    let rois = separated_rois(2, 3);
    let grid = threshold_grid(0.5).unwrap();
    let a = tune_thresholds(&rois, 0.5, 0.5).unwrap();
    assert!(grid.contains(&a.thresholds.t_d) && grid.contains(&a.thresholds.t_c));
    assert_eq!(a, tune_thresholds(&rois, 0.5, 0.5).unwrap());
}

fn map_strategy() -> impl Strategy<Value = DensityMap> {
    (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
        // few distinct levels so plateaus are common
        proptest::collection::vec(0u8..5, w * h)
            .prop_map(move |v| DensityMap::from_raw(w, h, v.into_iter().map(|x| f32::from(x) / 4.0).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn peaks_equal_window_scan(map in map_strategy(), t in 0.0f64..1.0) {
        let got: Vec<(usize, usize)> = detect_peaks(&map, t).iter().map(|p| (p.x, p.y)).collect();
        prop_assert_eq!(&got, &scan_peaks(&map, t));
        let higher = detect_peaks(&map, t + 0.2).len();
        prop_assert!(higher <= got.len());
    }

    #[test]
    fn matching_is_translation_invariant(
        pts in proptest::collection::vec((0u32..60, 0u32..60, any::<bool>()), 0..20),
        dx in 0u32..500, dy in 0u32..500,
    ) {
        let dets: Vec<(f64, f64)> = pts.iter().filter(|p| p.2).map(|p| (f64::from(p.0), f64::from(p.1))).collect();
        let labels: Vec<(f64, f64)> = pts.iter().filter(|p| !p.2).map(|p| (f64::from(p.0), f64::from(p.1))).collect();
        let shift = |v: &[(f64, f64)]| v.iter().map(|&(x, y)| (x + f64::from(dx), y + f64::from(dy))).collect::<Vec<_>>();
        let a = greedy_match(&dets, &labels, MATCH_RADIUS_UM, MPP).unwrap();
        let b = greedy_match(&shift(&dets), &shift(&labels), MATCH_RADIUS_UM, MPP).unwrap();
        let key = |m: &tcr_core::eval::MatchResult| m.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>();
        prop_assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn labels_ignore_cell_order(scores in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30), t_c in 0.0f64..1.0) {
        let th = Thresholds { t_d: 0.0, t_c, alpha: 0.5 };
        let labels: Vec<CellClass> = scores.iter().map(|&(c, s)| classify(&Scores { i_d: 1.0, i_c: c, i_s: s }, &th).0).collect();
        let rev: Vec<CellClass> = scores.iter().rev().map(|&(c, s)| classify(&Scores { i_d: 1.0, i_c: c, i_s: s }, &th).0).collect();
        prop_assert!(labels.iter().eq(rev.iter().rev()));
        let higher = Thresholds { t_c: t_c + 0.1, ..th };
        let n_hi = scores.iter().filter(|&&(c, s)| classify(&Scores { i_d: 1.0, i_c: c, i_s: s }, &higher).0 == CellClass::Tumor).count();
        prop_assert!(n_hi <= compute_tcr(&labels).tumor);
    }

    #[test]
    fn tuning_matches_grid_oracle(seed in 0u64..1000) {
        // overlapping score ranges so the optimum is not trivial
        let mut rois = separated_rois(seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for roi in &mut rois {
            for c in &mut roi.candidates {
                c.scores.i_d = rng.random();
                c.scores.i_c = (c.scores.i_c + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0);
                c.scores.i_s = c.scores.i_c;
            }
        }
        let r = tune_thresholds(&rois, 0.1, 0.5).unwrap();
        prop_assert_eq!(r.thresholds, grid_oracle(&rois, 0.1));
    }
}
