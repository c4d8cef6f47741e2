//! Headline acceptance checks. Each criterion prints one `PASS`/`FAIL` line
//! straight to the terminal, so the summary shows up without `--nocapture`.
//!
//! The throughput criterion needs at least four hardware threads. On smaller
//! hosts its line is still printed (and says why it failed), but it does not
//! fail the test run.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcr_core::annotations::CellClass;
use tcr_core::eval::{classification_metrics, detection_metrics, greedy_match, tcr_error, tune_thresholds, MATCH_RADIUS_UM};
use tcr_core::experiment::{end_to_end, generate_corpus, split_corpus, EndToEndModels, EndToEndReport, ExperimentConfig};
use tcr_core::nn::*;
use tcr_core::pipeline::{run_pipeline, Analyzer, ModelSlot, PipelineOutput, StageTiming};
use tcr_core::postprocess::Thresholds;
use tcr_core::slide::synth::{SynthParams, SyntheticSlide};
use tcr_core::slide::SlidePyramid;
use tcr_core::trainer::{Split, TrainConfig};
use tcr_core::unet::{receptive_field, ModelConfig, ModelKind, Unet};

mod common;
use common::{brute_match, grid_oracle, max_rel_err, numeric_grad, rand_tensor, separated_rois, shapes, MPP, TOL};

struct Outcome {
    pass: bool,
    detail: String,
    /// Failure explained by the host rather than the code.
    host_limited: bool,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into(), host_limited: false }
    }
}

fn emit(line: &str) {
    // direct handle: libtest only captures the print macros
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> (String, Outcome) {
    let start = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::new(false, format!("panicked: {msg}"))
    });
    let tag = if o.pass { "PASS" } else { "FAIL" };
    emit(&format!("{tag} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64()));
    (name.to_string(), o)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    let sweep = shapes(&mut rng, 20);
    for &[n, c, h, w] in &sweep {
        let co = rng.random_range(1..=3);
        let x = rand_tensor(&mut rng, &[n, c, h, w]);

        let k = if rng.random_bool(0.3) { 1 } else { 3 };
        let wt = rand_tensor(&mut rng, &[co, c, k, k]);
        let b: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rand_tensor(&mut rng, &[n, co, h, w]);
        let g = conv2d_backward(&x, &wt, &r).unwrap();
        note("conv2d", max_rel_err(g.input.data(), &numeric_grad(&x, |p| conv2d(p, &wt, &b).unwrap().dot(&r))));
        note("conv2d", max_rel_err(g.weight.data(), &numeric_grad(&wt, |p| conv2d(&x, p, &b).unwrap().dot(&r))));
        let bt = Tensor::from_vec(&[co], b.clone()).unwrap();
        note("conv2d", max_rel_err(g.bias.data(), &numeric_grad(&bt, |p| conv2d(&x, &wt, p.data()).unwrap().dot(&r))));

        let wt = rand_tensor(&mut rng, &[c, co, 2, 2]);
        let r = rand_tensor(&mut rng, &[n, co, 2 * h, 2 * w]);
        let g = transposed_conv2d_backward(&x, &wt, &r).unwrap();
        let f = |xx: &Tensor<f64>, ww: &Tensor<f64>, bb: &[f64]| transposed_conv2d(xx, ww, bb).unwrap().dot(&r);
        note("transposed_conv2d", max_rel_err(g.input.data(), &numeric_grad(&x, |p| f(p, &wt, &b))));
        note("transposed_conv2d", max_rel_err(g.weight.data(), &numeric_grad(&wt, |p| f(&x, p, &b))));
        note("transposed_conv2d", max_rel_err(g.bias.data(), &numeric_grad(&bt, |p| f(&x, &wt, p.data()))));

        let len = n * c * h * w;
        let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
        for i in (1..len).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let xp = Tensor::from_vec(&[n, c, h, w], vals).unwrap();
        let (y, idx) = maxpool2x2(&xp).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let dx = maxpool2x2_backward(&r, &idx).unwrap();
        note("maxpool2x2", max_rel_err(dx.data(), &numeric_grad(&xp, |p| maxpool2x2(p).unwrap().0.dot(&r))));

        let mut bn = BatchNorm::<f64>::new(c);
        bn.gamma = rand_tensor(&mut rng, &[c]);
        bn.beta = rand_tensor(&mut rng, &[c]);
        let r = rand_tensor(&mut rng, &[n, c, h, w]);
        let (_, cache) = batchnorm2d(&x, &mut bn.clone(), Mode::Train).unwrap();
        let (dx, dg, db) = batchnorm2d_backward(&r, &bn, &cache.unwrap()).unwrap();
        let f = |xx: &Tensor<f64>, b: &BatchNorm<f64>| batchnorm2d(xx, &mut b.clone(), Mode::Train).unwrap().0.dot(&r);
        note("batchnorm2d", max_rel_err(dx.data(), &numeric_grad(&x, |p| f(p, &bn))));
        let ng = numeric_grad(&bn.gamma, |p| f(&x, &BatchNorm { gamma: p.clone(), ..bn.clone() }));
        note("batchnorm2d", max_rel_err(dg.data(), &ng));
        let nb = numeric_grad(&bn.beta, |p| f(&x, &BatchNorm { beta: p.clone(), ..bn.clone() }));
        note("batchnorm2d", max_rel_err(db.data(), &nb));

        let g = relu_backward(&x, &r).unwrap();
        note("relu", max_rel_err(g.data(), &numeric_grad(&x, |p| relu(p).dot(&r))));
        let g = sigmoid_backward(&sigmoid(&x), &r).unwrap();
        note("sigmoid", max_rel_err(g.data(), &numeric_grad(&x, |p| sigmoid(p).dot(&r))));

        let c2 = rng.random_range(1..=3);
        let other = rand_tensor(&mut rng, &[n, c2, h, w]);
        let rc = rand_tensor(&mut rng, &[n, c + c2, h, w]);
        let (ga, gb) = split_channels(&rc, c).unwrap();
        note("concat", max_rel_err(ga.data(), &numeric_grad(&x, |p| concat_channels(p, &other).unwrap().dot(&rc))));
        note("concat", max_rel_err(gb.data(), &numeric_grad(&other, |p| concat_channels(&x, p).unwrap().dot(&rc))));

        let logits = x.map(|v| v * 4.0);
        let y = rand_tensor(&mut rng, &[n, c, h, w]).map(|v| (v + 1.0) / 2.0);
        let (_, g) = bce_with_sigmoid(&logits, &y).unwrap();
        note("bce_with_sigmoid", max_rel_err(g.data(), &numeric_grad(&logits, |p| bce_with_sigmoid(p, &y).unwrap().0)));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let list: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome::new(
        max < TOL && secs < 120.0,
        format!("{} shapes, max rel err {max:.2e} [{}]", sweep.len(), list.join(", ")),
    )
}

fn formula_fidelity() -> Outcome {
    let mut bad = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-12 {
            bad.push(format!("{name}: {got} != {want}"));
        }
    };
    let d = detection_metrics(8, 2, 1);
    let (pre, rec) = (8.0 / 10.0, 8.0 / 9.0);
    expect("det acc", d.accuracy, 8.0 / 11.0);
    expect("det pre", d.precision, pre);
    expect("det rec", d.recall, rec);
    expect("det f1", d.f1, 2.0 * pre * rec / (pre + rec));
    let d = detection_metrics(5, 0, 0);
    expect("det perfect f1", d.f1, 1.0);
    let d = detection_metrics(0, 3, 2);
    expect("det zero f1", d.f1, 0.0);

    let c = classification_metrics(50, 40, 10, 0);
    expect("cls acc", c.accuracy, 0.9);
    expect("cls pre_pos", c.precision_pos, 50.0 / 60.0);
    expect("cls rec_pos", c.recall_pos, 1.0);
    expect("cls pre_neg", c.precision_neg, 1.0);
    expect("cls rec_neg", c.recall_neg, 40.0 / 50.0);
    let (p, r) = ((50.0 / 60.0 + 1.0) / 2.0, (1.0 + 0.8) / 2.0);
    expect("cls P", c.precision, p);
    expect("cls R", c.recall, r);
    expect("cls f1", c.f1, 2.0 * p * r / (p + r));

    expect("tcr error", tcr_error(&[0.30, 0.50], &[0.25, 0.40]).unwrap(), (0.05 + 0.1) / 2.0);
    expect("tcr error equal", tcr_error(&[0.4, 0.6], &[0.4, 0.6]).unwrap(), 0.0);
    expect("tcr error extreme", tcr_error(&[1.0], &[0.0]).unwrap(), 1.0);

    let one = |v: f64| Tensor::from_vec(&[1, 1, 1, 1], vec![v]).unwrap();
    let (l, g) = bce_with_sigmoid(&one(0.0), &one(1.0)).unwrap();
    expect("bce(0,1)", l, std::f64::consts::LN_2);
    expect("bce'(0,1)", g.data()[0], -0.5);
    let (l, _) = bce_with_sigmoid(&one(1.0), &one(0.0)).unwrap();
    expect("bce(1,0)", l, (1.0 + 1f64.exp()).ln());
    let (l, _) = bce_with_sigmoid(&one(100.0), &one(1.0)).unwrap();
    if !(l < 1e-6) {
        bad.push(format!("bce(100,1) = {l}"));
    }
    Outcome::new(bad.is_empty(), if bad.is_empty() { "all tabulated values within 1e-12".into() } else { bad.join("; ") })
}

fn receptive_field_criterion() -> Outcome {
    let rf = receptive_field(&ModelConfig::calibrated(ModelKind::DetCls));
    Outcome::new(rf == 188, format!("calibrated receptive field {rf}"))
}

fn experiment_config(with_seg: bool) -> ExperimentConfig {
    let shrink = |mut c: TrainConfig| {
        c.patch_size = 96;
        c.examples_per_epoch = 320;
        c.max_epochs = 6;
        c.val_patches = 64;
        c
    };
    ExperimentConfig {
        detcls: shrink(TrainConfig::desk(ModelKind::DetCls)),
        seg: with_seg.then(|| shrink(TrainConfig::desk(ModelKind::Seg))),
        grid_step: 0.05,
        alpha: 0.5,
        split_seed: 3,
        model_seed: 5,
        workers: 1,
    }
}

fn corpus_base(ambiguous_fraction: f64) -> SynthParams {
    SynthParams { width: 1024, height: 1024, tile_size: 512, ambiguous_fraction, ..Default::default() }
}

fn synthetic_end_to_end(root: &Path) -> Outcome {
    let corpus = generate_corpus(root, 40, &corpus_base(0.0), 11).unwrap();
    let (r, _) = end_to_end(&corpus, &experiment_config(false)).unwrap();
    let t = &r.single.test;
    let pass = t.detection.f1 >= 0.85
        && t.classification.accuracy >= 0.85
        && t.tcr_error <= 0.05
        && r.train_seconds <= 1800.0;
    Outcome::new(
        pass,
        format!(
            "{} test ROIs: det F1 {:.4}, cls acc {:.4}, TCR MAE {:.4}, DT+CL training {:.0}s",
            t.predicted_tcr.len(),
            t.detection.f1,
            t.classification.accuracy,
            t.tcr_error,
            r.train_seconds
        ),
    )
}

fn two_scale_benefit(r: &EndToEndReport) -> Outcome {
    let single = r.single.test.tcr_error;
    match &r.fused {
        Some(f) => Outcome::new(
            f.test.tcr_error <= single,
            format!(
                "TCR MAE fused {:.4} vs DT+CL alone {:.4} (cls acc {:.4} vs {:.4})",
                f.test.tcr_error, single, f.test.classification.accuracy, r.single.test.classification.accuracy
            ),
        ),
        None => Outcome::new(false, "no fused configuration was trained"),
    }
}

fn fused_analyzer(r: &EndToEndReport, models: &EndToEndModels, cfg: &ExperimentConfig) -> Analyzer {
    let seg = models.seg.as_ref().expect("seg model");
    let thresholds = r.fused.as_ref().expect("fused result").tune.thresholds;
    Analyzer::new(
        ModelSlot { model: models.detcls.model.clone(), factor: cfg.detcls.factor },
        Some(ModelSlot { model: seg.model.clone(), factor: cfg.seg.as_ref().unwrap().factor }),
        thresholds,
    )
    .unwrap()
}

type CellKey = (u64, u64, u64, u64, u64, CellClass);

fn cell_set(out: &PipelineOutput) -> BTreeSet<CellKey> {
    out.cells.iter().map(|c| (c.x, c.y, c.i_d.to_bits(), c.i_c.to_bits(), c.i_s.to_bits(), c.class)).collect()
}

fn tiling_invariance(slide: &SlidePyramid, an: &Analyzer) -> Outcome {
    let region = slide.bounds();
    let mut sets = Vec::new();
    let mut tiles = Vec::new();
    for interior in [1024, 512, 256] {
        let mut a = an.clone();
        a.interior = interior;
        a.halo = 94;
        let out = run_pipeline(slide, &region, &a, 1, None).unwrap();
        tiles.push(out.tiles);
        sets.push(cell_set(&out));
    }
    let pass = tiles == [1, 4, 16] && sets[0] == sets[1] && sets[0] == sets[2] && !sets[0].is_empty();
    Outcome::new(pass, format!("tiles {tiles:?}, {} cells, sets equal: {}", sets[0].len(), sets[0] == sets[1] && sets[0] == sets[2]))
}

fn parallel_determinism(slide: &SlidePyramid, an: &Analyzer) -> Outcome {
    let mut a = an.clone();
    a.interior = 256;
    let runs: Vec<Vec<u8>> =
        [1, 2, 8].iter().map(|&w| run_pipeline(slide, &slide.bounds(), &a, w, None).unwrap().deterministic_bytes()).collect();
    let same = runs.iter().all(|r| r == &runs[0]);
    Outcome::new(same, format!("workers 1/2/8, {} output bytes, identical: {same}", runs[0].len()))
}

fn throughput_scaling(dir: &Path, an: &Analyzer) -> Outcome {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    // 10 mm^2 at 40X
    let side = ((10.0e6f64).sqrt() / MPP).ceil() as u64 + 16;
    let p = SynthParams { width: side, height: side, tile_size: 512, seed: 99, tumor_blobs: 40, ..Default::default() };
    let slide = SyntheticSlide::generate(&p).unwrap().write(dir).unwrap();
    let mut a = an.clone();
    a.interior = 1024;
    let one = run_pipeline(&slide, &slide.bounds(), &a, 1, None).unwrap();
    let four = run_pipeline(&slide, &slide.bounds(), &a, 4, None).unwrap();
    let speedup = four.throughput_mm2_s / one.throughput_mm2_s;
    let names: Vec<&str> = four.timing.seconds.stages().iter().map(|s| s.0).collect();
    let share_sum = |o: &PipelineOutput| o.timing.seconds.shares().iter().map(|s| s.1).sum::<f64>();
    let shares_ok = share_sum(&one) <= 1.0 + 1e-9 && share_sum(&four) <= 1.0 + 1e-9;
    let pass = speedup >= 2.5 && shares_ok && names == StageTiming::STAGES && one.area_mm2 >= 10.0;
    let mut detail = format!(
        "{:.2} mm2, 1 worker {:.4} mm2/s, 4 workers {:.4} mm2/s, speedup {speedup:.2}x, share sums {:.3}/{:.3}, {} hardware threads",
        one.area_mm2,
        one.throughput_mm2_s,
        four.throughput_mm2_s,
        share_sum(&one),
        share_sum(&four),
        cores
    );
    let host_limited = !pass && cores < 4 && shares_ok;
    if host_limited {
        detail.push_str("; host has fewer than 4 hardware threads, not counted against the run");
    }
    Outcome { pass, detail, host_limited }
}

fn threshold_tuning() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for seed in [9, 17, 31] {
        let rois = separated_rois(seed, 6);
        let r = tune_thresholds(&rois, 0.05, 0.5).unwrap();
        let th = r.thresholds;
        // true peaks at or above 0.9, spurious at or below 0.3; fused tumor
        // scores at or above 0.6, normal at or below 0.5
        let in_gap = th.t_d > 0.3 && th.t_d <= 0.9 && th.t_c >= 0.5 && th.t_c < 0.6;
        let oracle = grid_oracle(&rois, 0.05);
        pass &= in_gap && th == oracle && th.t_d == 0.35;
        notes.push(format!("seed {seed}: t_d {} t_c {}", th.t_d, th.t_c));
    }
    Outcome::new(pass, notes.join(", ") + "; equal to the exhaustive grid oracle")
}

fn greedy_matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let r = MATCH_RADIUS_UM / MPP;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let nd = rng.random_range(0..=12);
        let nl = rng.random_range(0..=12);
        let side = rng.random_range(10.0..80.0f64);
        let mut pt = || ((rng.random::<f64>() * side).round(), (rng.random::<f64>() * side).round());
        let dets: Vec<(f64, f64)> = (0..nd).map(|_| pt()).collect();
        let labels: Vec<(f64, f64)> = (0..nl).map(|_| pt()).collect();
        let m = greedy_match(&dets, &labels, MATCH_RADIUS_UM, MPP).unwrap();
        let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.0, p.1)).collect();
        if got != brute_match(&dets, &labels, r) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("1000 random instances, {mismatches} mismatches"))
}

#[test]
fn primary_criteria() {
    let work = tempfile::tempdir().unwrap();
    emit("");
    let mut results = vec![
        run("gradient correctness", gradient_correctness),
        run("formula fidelity", formula_fidelity),
        run("receptive field", receptive_field_criterion),
        run("threshold tuning", threshold_tuning),
        run("greedy matching", greedy_matching),
        run("synthetic end-to-end", || synthetic_end_to_end(&work.path().join("plain"))),
    ];

    // context-dependent morphology: trains DT+CL and SEG once, reused below
    let cfg = experiment_config(true);
    let trained = catch_unwind(AssertUnwindSafe(|| {
        let corpus = generate_corpus(&work.path().join("context"), 40, &corpus_base(0.2), 7).unwrap();
        let (r, m) = end_to_end(&corpus, &cfg).unwrap();
        let split = split_corpus(&corpus, cfg.split_seed).unwrap();
        let test_slide = corpus[split.slides_in(Split::Test)[0]].slide.clone();
        (r, m, test_slide)
    }));
    match trained {
        Ok((report, models, slide)) => {
            results.push(run("two-scale benefit", || two_scale_benefit(&report)));
            let an = fused_analyzer(&report, &models, &cfg);
            results.push(run("tiling invariance", || tiling_invariance(&slide, &an)));
            results.push(run("parallel determinism", || parallel_determinism(&slide, &an)));
            results.push(run("throughput scaling", || throughput_scaling(&work.path().join("large"), &an)));
        }
        Err(_) => {
            for name in ["two-scale benefit", "tiling invariance", "parallel determinism", "throughput scaling"] {
                results.push(run(name, || Outcome::new(false, "training on the context corpus failed")));
            }
        }
    }

    let passed = results.iter().filter(|r| r.1.pass).count();
    emit(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    let blocking: Vec<&str> = results.iter().filter(|r| !r.1.pass && !r.1.host_limited).map(|r| r.0.as_str()).collect();
    assert!(blocking.is_empty(), "failed criteria: {blocking:?}");
}

#[test]
fn random_models_run_on_a_small_slide() {
    // smoke check of the throughput path without training
    let dir = tempfile::tempdir().unwrap();
    let p = SynthParams { width: 600, height: 600, tile_size: 256, seed: 3, ..Default::default() };
    let slide = SyntheticSlide::generate(&p).unwrap().write(dir.path()).unwrap();
    let an = Analyzer::new(
        ModelSlot { model: Unet::new(ModelConfig::desk(ModelKind::DetCls), 1).unwrap(), factor: 0.5 },
        Some(ModelSlot { model: Unet::new(ModelConfig::desk(ModelKind::Seg), 2).unwrap(), factor: 0.25 }),
        Thresholds::default(),
    )
    .unwrap();
    let out = run_pipeline(&slide, &slide.bounds(), &an, 2, None).unwrap();
    assert!(out.throughput_mm2_s > 0.0 && !out.partial);
    assert_eq!(out.timing.seconds.stages().map(|s| s.0), StageTiming::STAGES);
}
