//! Synthetic-corpus experiments: generate slides, train the models, tune the
//! thresholds on train and validation slides, evaluate on test slides, and
//! sweep the processing magnification.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotations, CellClass, Rect};
use crate::eval::{
    classification_metrics, confusion, evaluate, tune_thresholds, Candidate, EvalError, EvalRoi, MetricReport,
    SweepPoint, TuneResult,
};
use crate::pipeline::{run_pipeline, Analyzer, ModelSlot, PipelineError};
use crate::postprocess::{classify, Scores, Thresholds};
use crate::slide::synth::{SynthParams, SyntheticSlide};
use crate::slide::{SlideError, SlidePyramid};
use crate::trainer::{partition, train, DatasetSplit, EpochRecord, SlideRois, TrainConfig, TrainError, TrainingRoi};
use crate::unet::{ModelKind, Unet, UnetError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Unet(#[from] UnetError),
    #[error("slide {0} has no annotations")]
    NoAnnotations(String),
    #[error("corpus i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone)]
pub struct CorpusSlide {
    pub id: String,
    pub slide: SlidePyramid,
    pub annotations: Annotations,
}

/// Parameters of slide `index` in a corpus: the base parameters with a
/// derived seed and a tumor-blob count of 0 to 3.
pub fn corpus_params(base: &SynthParams, seed: u64, index: usize) -> SynthParams {
    let s = crate::trainer::sample_seed(seed, 0x51de, index as u64);
    SynthParams { seed: s, tumor_blobs: (s % 4) as usize, ..base.clone() }
}

/// Writes `count` synthetic slides to `root/slide_NNN`.
pub fn generate_corpus(root: &Path, count: usize, base: &SynthParams, seed: u64) -> Result<Vec<CorpusSlide>> {
    (0..count)
        .map(|i| {
            let id = format!("slide_{i:03}");
            let s = SyntheticSlide::generate(&corpus_params(base, seed, i))?;
            let slide = s.write(&root.join(&id))?;
            Ok(CorpusSlide { id, slide, annotations: s.annotations })
        })
        .collect()
}

/// Opens every annotated pyramid directly under `root`, sorted by name.
pub fn open_corpus(root: &Path) -> Result<Vec<CorpusSlide>> {
    let io = |source| ExperimentError::Io { path: root.to_path_buf(), source };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::slide::MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    dirs.into_iter()
        .map(|d| {
            let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let slide = SlidePyramid::open(&d)?;
            let annotations = slide.annotations()?.ok_or_else(|| ExperimentError::NoAnnotations(id.clone()))?;
            Ok(CorpusSlide { id, slide, annotations })
        })
        .collect()
}

pub fn split_corpus(corpus: &[CorpusSlide], seed: u64) -> Result<DatasetSplit> {
    let slides: Vec<SlideRois> =
        corpus.iter().map(|c| SlideRois { id: c.id.clone(), rois: c.annotations.rois.clone() }).collect();
    Ok(partition(&slides, seed)?)
}

/// Training ROIs of the given slides at `factor`.
pub fn training_rois(corpus: &[CorpusSlide], slides: &[usize], factor: f64, kind: ModelKind) -> Result<Vec<TrainingRoi>> {
    let mut out = Vec::new();
    for &i in slides {
        let c = &corpus[i];
        for roi in &c.annotations.rois {
            out.push(TrainingRoi::from_slide(&c.slide, &c.annotations, roi, factor, kind)?);
        }
    }
    Ok(out)
}

/// Runs the analyzer over each whole slide with `t_d = floor` and splits the
/// peaks into the slide's ROIs. Whole-slide runs give ROI-border cells their
/// full context.
pub fn eval_rois(corpus: &[CorpusSlide], slides: &[usize], an: &Analyzer, floor: f64, workers: usize) -> Result<Vec<EvalRoi>> {
    let mut probe = an.clone();
    probe.thresholds.t_d = floor;
    let mut out = Vec::new();
    for &i in slides {
        let c = &corpus[i];
        let run = run_pipeline(&c.slide, &c.slide.bounds(), &probe, workers, None)?;
        for roi in &c.annotations.rois {
            let candidates = run
                .cells
                .iter()
                .filter(|cell| roi.contains_point(cell.x as f64, cell.y as f64))
                .map(|cell| Candidate { x: cell.x, y: cell.y, scores: cell.scores().into() })
                .collect();
            let labels = c.annotations.points_in(roi).copied().collect();
            out.push(EvalRoi { roi: *roi, mpp: c.slide.mpp(), candidates, labels });
        }
    }
    Ok(out)
}

/// Classification F1 with ground-truth positions: `I_c` and `I_s` are read
/// at each labeled cell instead of at detected peaks.
pub fn classify_at_labels(corpus: &[CorpusSlide], slides: &[usize], an: &Analyzer) -> Result<f64> {
    let mut pairs = Vec::new();
    for &i in slides {
        let c = &corpus[i];
        let bounds = c.slide.bounds();
        let det_img = c.slide.read_region(&bounds, an.detcls.factor)?.image;
        let det = an.detcls.model.forward_maps(&det_img)?;
        let seg = match &an.seg {
            Some(s) => Some((s.model.forward_maps(&c.slide.read_region(&bounds, s.factor)?.image)?, s.factor)),
            None => None,
        };
        for p in &c.annotations.points {
            let (x, y) = (p.x + 0.5, p.y + 0.5);
            let fd = an.detcls.factor;
            let px = ((x * fd - 0.5).round().max(0.0) as usize).min(det[1].width - 1);
            let py = ((y * fd - 0.5).round().max(0.0) as usize).min(det[1].height - 1);
            let i_c = f64::from(det[1].get(px, py));
            let i_s = match &seg {
                Some((m, f)) => m[0].bilinear(x * f - 0.5, y * f - 0.5).0,
                None => i_c,
            };
            let (pred, _) = classify(&Scores { i_d: 1.0, i_c, i_s }, &an.thresholds);
            pairs.push((pred, p.class));
        }
    }
    let (tp, tn, fp, fn_) = confusion(pairs);
    Ok(classification_metrics(tp, tn, fp, fn_).f1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub detcls: TrainConfig,
    pub seg: Option<TrainConfig>,
    pub grid_step: f64,
    pub alpha: f64,
    pub split_seed: u64,
    pub model_seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Unet<f32>,
    pub curve: Vec<EpochRecord>,
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub seconds: f64,
}

pub fn train_model(corpus: &[CorpusSlide], split: &DatasetSplit, cfg: &TrainConfig, model_seed: u64) -> Result<TrainedModel> {
    let kind = cfg.kind();
    let start = Instant::now();
    let tr = training_rois(corpus, &split.slides_in(crate::trainer::Split::Train), cfg.factor, kind)?;
    let va = training_rois(corpus, &split.slides_in(crate::trainer::Split::Validation), cfg.factor, kind)?;
    let model = Unet::new(cfg.model, model_seed)?;
    let out = train(model, &tr, &va, cfg)?;
    Ok(TrainedModel {
        model: out.model,
        curve: out.curve,
        initial_val_loss: out.initial_val_loss,
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Tuned thresholds and test metrics of one analyzer configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigResult {
    pub tune: TuneResult,
    pub test: MetricReport,
}

/// Tunes on train + validation slides, then evaluates on test slides.
pub fn tune_and_test(corpus: &[CorpusSlide], split: &DatasetSplit, an: &Analyzer, cfg: &ExperimentConfig) -> Result<ConfigResult> {
    let mut tune_slides = split.slides_in(crate::trainer::Split::Train);
    tune_slides.extend(split.slides_in(crate::trainer::Split::Validation));
    let floor = cfg.grid_step;
    let tune_set = eval_rois(corpus, &tune_slides, an, floor, cfg.workers)?;
    let tune = tune_thresholds(&tune_set, cfg.grid_step, cfg.alpha)?;
    let test_set = eval_rois(corpus, &split.slides_in(crate::trainer::Split::Test), an, floor, cfg.workers)?;
    let test = evaluate(&test_set, &tune.thresholds)?;
    Ok(ConfigResult { tune, test })
}

#[derive(Debug, Clone, Serialize)]
pub struct EndToEndReport {
    pub split: DatasetSplit,
    pub detcls_curve: Vec<EpochRecord>,
    pub seg_curve: Vec<EpochRecord>,
    pub train_seconds: f64,
    /// DT+CL alone.
    pub single: ConfigResult,
    /// DT+CL fused with SEG, when a SEG model was trained.
    pub fused: Option<ConfigResult>,
}

pub struct EndToEndModels {
    pub detcls: TrainedModel,
    pub seg: Option<TrainedModel>,
}

/// Trains DT+CL (and SEG), then tunes and tests both configurations.
pub fn end_to_end(corpus: &[CorpusSlide], cfg: &ExperimentConfig) -> Result<(EndToEndReport, EndToEndModels)> {
    let split = split_corpus(corpus, cfg.split_seed)?;
    let det = train_model(corpus, &split, &cfg.detcls, cfg.model_seed)?;
    let seg = cfg.seg.as_ref().map(|s| train_model(corpus, &split, s, cfg.model_seed + 1)).transpose()?;
    let th = Thresholds { alpha: cfg.alpha, ..Thresholds::default() };
    let det_slot = ModelSlot { model: det.model.clone(), factor: cfg.detcls.factor };
    let single_an = Analyzer::new(det_slot.clone(), None, th)?;
    let single = tune_and_test(corpus, &split, &single_an, cfg)?;
    let fused = match (&seg, &cfg.seg) {
        (Some(s), Some(sc)) => {
            let an = Analyzer::new(det_slot, Some(ModelSlot { model: s.model.clone(), factor: sc.factor }), th)?;
            Some(tune_and_test(corpus, &split, &an, cfg)?)
        }
        _ => None,
    };
    let report = EndToEndReport {
        split,
        detcls_curve: det.curve.clone(),
        seg_curve: seg.as_ref().map(|s| s.curve.clone()).unwrap_or_default(),
        train_seconds: det.seconds + seg.as_ref().map_or(0.0, |s| s.seconds),
        single,
        fused,
    };
    Ok((report, EndToEndModels { detcls: det, seg }))
}

/// Magnification sweep: one DT+CL model per factor, trained with the
/// kernel and patch settings of `base`, evaluated on the test slides.
/// Factors whose training fails are reported as skipped.
pub fn magnification_sweep(
    corpus: &[CorpusSlide],
    cfg: &ExperimentConfig,
    factors: &[f64],
) -> Result<Vec<SweepPoint>> {
    let split = split_corpus(corpus, cfg.split_seed)?;
    let test = split.slides_in(crate::trainer::Split::Test);
    let mut points = Vec::new();
    for &factor in factors {
        let tc = TrainConfig { factor, ..cfg.detcls.clone() };
        let trained = match train_model(corpus, &split, &tc, cfg.model_seed) {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!(factor, error = %e, "sweep point skipped");
                points.push(SweepPoint { factor, det: None, cls: None, det_cls: None });
                continue;
            }
        };
        let an = Analyzer::new(
            ModelSlot { model: trained.model, factor },
            None,
            Thresholds { alpha: cfg.alpha, ..Thresholds::default() },
        )?;
        let r = tune_and_test(corpus, &split, &an, cfg)?;
        let mut tuned = an.clone();
        tuned.thresholds = r.tune.thresholds;
        let cls = classify_at_labels(corpus, &test, &tuned)?;
        points.push(SweepPoint {
            factor,
            det: Some(r.test.detection.f1),
            cls: Some(cls),
            det_cls: Some(r.test.detcls_f1),
        });
    }
    Ok(points)
}

/// Exact ground-truth ratio of a region from annotation points.
pub fn region_truth(annotations: &Annotations, rect: &Rect) -> f64 {
    let (t, n) = annotations.counts_in(rect);
    if n == 0 { 0.0 } else { t as f64 / n as f64 }
}

/// Share of tumor cells in a corpus, for reporting.
pub fn tumor_share(corpus: &[CorpusSlide]) -> f64 {
    let (mut t, mut n) = (0usize, 0usize);
    for c in corpus {
        t += c.annotations.points.iter().filter(|p| p.class == CellClass::Tumor).count();
        n += c.annotations.points.len();
    }
    if n == 0 { 0.0 } else { t as f64 / n as f64 }
}
