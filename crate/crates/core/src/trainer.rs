//! Slide-level data split, patch sampling with augmentation, and the
//! training loop with validation-based early stopping.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{Annotations, Rect};
use crate::augment::{AugmentParams, StainBasis};
use crate::nn::{adam_step, bce_with_sigmoid, AdamState, NnError, Tensor};
use crate::raster::{DensityMap, RgbImage};
use crate::slide::{SlideError, SlidePyramid};
use crate::targets::{make_area_target, make_point_target, points_to_map, polygons_to_map, PeakKernel, PointMode};
use crate::unet::{output_receptive_field, save_weights, load_weights, ModelConfig, ModelKind, Unet, UnetError, WeightsError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("need at least 3 slides to split, got {0}")]
    TooFewSlides(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no ROIs in the {0} split")]
    EmptyPool(&'static str),
    #[error("loss diverged (non-finite) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Unet(#[from] UnetError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("curve csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// A slide and the ROIs annotated on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRois {
    pub id: String,
    pub rois: Vec<Rect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiRef {
    pub slide: usize,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    /// Split of each input slide, by input index.
    pub assignment: Vec<Split>,
    pub train: Vec<RoiRef>,
    pub validation: Vec<RoiRef>,
    pub test: Vec<RoiRef>,
}

impl DatasetSplit {
    pub fn slides_in(&self, split: Split) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == split).collect()
    }
}

const SPLIT_SHARES: [(Split, f64); 3] = [(Split::Train, 0.7), (Split::Validation, 0.1), (Split::Test, 0.2)];

/// Slide-level 70/10/20 split. Slides are shuffled by `seed` and each goes to
/// the split furthest below its target share of ROIs (ties in the order
/// train, validation, test). A split left empty takes the last slide added
/// to the largest split.
pub fn partition(slides: &[SlideRois], seed: u64) -> Result<DatasetSplit> {
    if slides.len() < 3 {
        return Err(TrainError::TooFewSlides(slides.len()));
    }
    let weight = |i: usize| slides[i].rois.len().max(1) as f64;
    let total: f64 = (0..slides.len()).map(weight).sum();
    let mut order: Vec<usize> = (0..slides.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut filled = [0.0f64; 3];
    let mut members: [Vec<usize>; 3] = Default::default();
    for &i in &order {
        let mut best = 0;
        for k in 1..3 {
            let deficit = |k: usize| SPLIT_SHARES[k].1 * total - filled[k];
            if deficit(k) > deficit(best) {
                best = k;
            }
        }
        filled[best] += weight(i);
        members[best].push(i);
    }
    for k in 0..3 {
        if members[k].is_empty() {
            let donor = (0..3).max_by_key(|&d| members[d].len()).expect("three splits");
            let moved = members[donor].pop().expect("donor has at least two slides");
            members[k].push(moved);
        }
    }
    let mut assignment = vec![Split::Train; slides.len()];
    for k in 0..3 {
        for &i in &members[k] {
            assignment[i] = SPLIT_SHARES[k].0;
        }
    }
    let rois = |split: Split| -> Vec<RoiRef> {
        (0..slides.len())
            .filter(|&i| assignment[i] == split)
            .flat_map(|i| slides[i].rois.iter().map(move |&rect| RoiRef { slide: i, rect }))
            .collect()
    };
    Ok(DatasetSplit {
        seed,
        train: rois(Split::Train),
        validation: rois(Split::Validation),
        test: rois(Split::Test),
        assignment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub examples_per_epoch: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Square patch side in pixels at the training magnification.
    pub patch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Resize factor relative to 40X (0.5 = 20X).
    pub factor: f64,
    pub model: ModelConfig,
    pub val_patches: usize,
    pub augment: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: DT+CL at 20X, SEG at 10X.
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            lr: 1e-3,
            examples_per_epoch: 4000,
            patience: 4,
            batch_size: 2,
            patch_size: 256,
            max_epochs: 200,
            seed: 0,
            factor: match kind {
                ModelKind::DetCls => 0.5,
                ModelKind::Seg => 0.25,
            },
            model: ModelConfig::desk(kind),
            val_patches: 256,
            augment: true,
        }
    }

    pub fn kind(&self) -> ModelKind {
        if self.model.out_maps == 1 { ModelKind::Seg } else { ModelKind::DetCls }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.model.validate()?;
        if !(self.lr > 0.0) || !(self.factor > 0.0 && self.factor <= 1.0) {
            return bad(format!("lr {} and factor {} must be positive (factor at most 1)", self.lr, self.factor));
        }
        if self.examples_per_epoch == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.val_patches == 0 {
            return bad("examples_per_epoch, batch_size, max_epochs and val_patches must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        let rf = output_receptive_field(&self.model);
        if self.patch_size < rf {
            return bad(format!("patch size {} is below the model's receptive field {rf}", self.patch_size));
        }
        if !self.patch_size.is_multiple_of(self.model.alignment()) {
            return bad(format!("patch size {} must be a multiple of {}", self.patch_size, self.model.alignment()));
        }
        Ok(())
    }
}

/// An ROI prepared for sampling: the image at the training magnification
/// and its full-size target maps.
#[derive(Debug, Clone)]
pub struct TrainingRoi {
    pub image: RgbImage,
    pub targets: Vec<DensityMap>,
}

impl TrainingRoi {
    pub fn new(image: RgbImage, targets: Vec<DensityMap>) -> Self {
        assert!(targets.iter().all(|t| (t.width, t.height) == (image.width, image.height)), "target size mismatch");
        Self { image, targets }
    }

    /// Reads `rect` at `factor` and renders the targets for `kind`: peak
    /// maps for all cells and for tumor cells, or the filled tumor area.
    pub fn from_slide(
        slide: &SlidePyramid,
        annotations: &Annotations,
        rect: &Rect,
        factor: f64,
        kind: ModelKind,
    ) -> Result<Self> {
        let read = slide.read_region(rect, factor)?;
        let (w, h) = (read.image.width, read.image.height);
        let targets = match kind {
            ModelKind::DetCls => {
                let pts = points_to_map(&annotations.points, &read.rect, factor);
                let kernel = PeakKernel::for_factor(factor);
                vec![
                    make_point_target(&pts, w, h, &kernel, PointMode::All).0,
                    make_point_target(&pts, w, h, &kernel, PointMode::TumorOnly).0,
                ]
            }
            ModelKind::Seg => vec![make_area_target(&polygons_to_map(&annotations.polygons, &read.rect, factor), w, h).0],
        };
        Ok(Self::new(read.image, targets))
    }
}

/// Deterministic per-sample seed.
pub fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub roi: usize,
    pub image: RgbImage,
    pub targets: Vec<DensityMap>,
}

/// Draws an ROI uniformly, then a uniform `size x size` window inside it,
/// then (optionally) a random augmentation. An ROI smaller than the patch is
/// placed at the origin and the remainder is padded white with zero targets.
pub fn sample_patch(rois: &[TrainingRoi], size: usize, seed: u64, augment: bool, basis: &StainBasis) -> Patch {
    assert!(!rois.is_empty(), "empty ROI pool");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roi = rng.random_range(0..rois.len());
    let r = &rois[roi];
    let (w, h) = (r.image.width, r.image.height);
    let x = if w > size { rng.random_range(0..=w - size) } else { 0 };
    let y = if h > size { rng.random_range(0..=h - size) } else { 0 };
    let (cw, ch) = (size.min(w), size.min(h));
    if cw < size || ch < size {
        tracing::debug!(roi, w, h, size, "ROI smaller than the patch; padding");
    }
    let mut image = RgbImage::filled(size, size, [255, 255, 255]);
    image.paste(&r.image.crop(x, y, cw, ch), 0, 0);
    let targets: Vec<DensityMap> = r
        .targets
        .iter()
        .map(|t| {
            let mut out = DensityMap::zeros(size, size);
            let part = t.crop(x, y, cw, ch);
            for row in 0..ch {
                out.data[row * size..row * size + cw].copy_from_slice(&part.data[row * cw..(row + 1) * cw]);
            }
            out
        })
        .collect();
    if !augment {
        return Patch { roi, image, targets };
    }
    let params = AugmentParams::sample(&mut rng);
    let (image, targets) = params.apply(&image, &targets, basis);
    Patch { roi, image, targets }
}

fn batch_tensors(patches: &[Patch]) -> (Tensor<f32>, Tensor<f32>) {
    let n = patches.len();
    let (w, h) = (patches[0].image.width, patches[0].image.height);
    let k = patches[0].targets.len();
    let mut x = Vec::with_capacity(n * 3 * w * h);
    let mut y = Vec::with_capacity(n * k * w * h);
    for p in patches {
        x.extend_from_slice(p.image.to_tensor().data());
        for t in &p.targets {
            y.extend_from_slice(&t.data);
        }
    }
    (
        Tensor::from_vec(&[n, 3, h, w], x).expect("batch length"),
        Tensor::from_vec(&[n, k, h, w], y).expect("target length"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Patience-based stopping on a validation series.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, initial: f64) -> Self {
        Self { patience, best: initial, best_epoch: 0, stale: 0 }
    }

    /// Records an epoch; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss (the initial
    /// weights if no epoch improved on them).
    pub model: Unet<f32>,
    pub initial_val_loss: f64,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn validation_loss(model: &Unet<f32>, val: &[Patch], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in val.chunks(batch) {
        let (x, y) = batch_tensors(chunk);
        let logits = model.forward_logits(&x)?;
        sum += bce_with_sigmoid(&logits, &y)?.0 * chunk.len() as f64;
    }
    Ok(sum / val.len() as f64)
}

/// Fixed, unaugmented validation patches.
pub fn validation_set(rois: &[TrainingRoi], config: &TrainConfig, basis: &StainBasis) -> Vec<Patch> {
    (0..config.val_patches)
        .map(|i| sample_patch(rois, config.patch_size, sample_seed(config.seed ^ 0x7a1, u64::MAX, i as u64), false, basis))
        .collect()
}

/// Trains `model` on patches from `train`, early-stopping on the loss over
/// a fixed patch set from `validation`. Only these two pools are visible.
pub fn train(
    mut model: Unet<f32>,
    train_rois: &[TrainingRoi],
    validation_rois: &[TrainingRoi],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_rois.is_empty() {
        return Err(TrainError::EmptyPool("train"));
    }
    if validation_rois.is_empty() {
        return Err(TrainError::EmptyPool("validation"));
    }
    if model.config() != &config.model {
        return Err(TrainError::Config("model topology differs from the training config".into()));
    }
    let basis = StainBasis::default();
    let val = validation_set(validation_rois, config, &basis);
    let initial_val_loss = validation_loss(&model, &val, config.batch_size)?;
    if !initial_val_loss.is_finite() {
        return Err(TrainError::Diverged { epoch: 0 });
    }
    let mut adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t));
    let mut stopper = EarlyStopping::new(config.patience, initial_val_loss);
    let mut best_model = model.clone();
    let mut curve = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut index = 0u64;
        while seen < config.examples_per_epoch {
            let n = config.batch_size.min(config.examples_per_epoch - seen);
            let patches: Vec<Patch> = (0..n)
                .map(|_| {
                    let s = sample_seed(config.seed, epoch as u64, index);
                    index += 1;
                    sample_patch(train_rois, config.patch_size, s, config.augment, &basis)
                })
                .collect();
            let (x, y) = batch_tensors(&patches);
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, d_logits) = bce_with_sigmoid(&logits, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let grads = model.backward(&cache, &d_logits)?;
            let grad_refs: Vec<&Tensor<f32>> = grads.named_params().into_iter().map(|(_, t)| t).collect();
            let mut params: Vec<&mut Tensor<f32>> = model.named_params_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &grad_refs, &mut adam, config.lr)?;
            loss_sum += loss * n as f64;
            seen += n;
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = validation_loss(&model, &val, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        curve.push(EpochRecord { epoch, train_loss, val_loss });
        tracing::info!(epoch, train_loss, val_loss, "epoch done");
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_model = model.clone();
        }
        if stop {
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best();
    Ok(TrainOutcome { model: best_model, initial_val_loss, curve, best_epoch, best_val_loss })
}

pub fn write_curve_csv<W: Write>(out: W, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// JSON stored next to a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save_checkpoint(model: &Unet<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    save_weights(model, path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(meta)?).map_err(|source| TrainError::Io { path: side, source })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expect: Option<ModelKind>) -> Result<(Unet<f32>, Option<CheckpointMeta>)> {
    let model = load_weights(path, expect)?;
    let side = sidecar_path(path);
    let meta = match std::fs::read(&side) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(source) => return Err(TrainError::Io { path: side, source }),
    };
    Ok((model, meta))
}
