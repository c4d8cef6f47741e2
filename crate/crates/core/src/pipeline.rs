//! Whole-slide analysis: halo-overlapped tiles processed by a worker pool,
//! deduplicated by interior ownership and aggregated into cells, a ratio, a
//! heatmap and a stage timing profile.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::annotations::{CellClass, Rect};
use crate::postprocess::{compute_tcr, extract_cells, CellRecord, GeoMap, Thresholds};
use crate::slide::{SlideError, SlidePyramid};
use crate::trainer::load_checkpoint;
use crate::unet::{ModelKind, Unet, UnetError};

/// Halo at the detection magnification, half the calibrated receptive field.
pub const DEFAULT_HALO: u64 = 94;
pub const DEFAULT_INTERIOR: u64 = 1024;
pub const DEFAULT_HEATMAP_UM: f64 = 128.0;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("region {region:?} is not inside the slide ({width}x{height})")]
    Region { region: Rect, width: u64, height: u64 },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("tile {index}: {source}")]
    Tile { index: usize, source: Box<PipelineError> },
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Unet(#[from] UnetError),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
    #[error("config i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub weights: PathBuf,
    /// Resize factor relative to 40X.
    pub factor: f64,
}

/// On-disk pipeline configuration. Relative weight paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub detcls: ModelRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<ModelRef>,
    pub thresholds: Thresholds,
    /// Halo in pixels at the detection magnification.
    #[serde(default = "default_halo")]
    pub halo: u64,
    /// Interior tile side in level-0 pixels.
    #[serde(default = "default_interior")]
    pub interior: u64,
    #[serde(default = "default_heatmap_um")]
    pub heatmap_um: f64,
}

fn default_halo() -> u64 {
    DEFAULT_HALO
}

fn default_interior() -> u64 {
    DEFAULT_INTERIOR
}

fn default_heatmap_um() -> f64 {
    DEFAULT_HEATMAP_UM
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: PipelineConfig = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.detcls.weights);
        if let Some(seg) = cfg.seg.as_mut() {
            resolve(&mut seg.weights);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
            .map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
    }
}

/// A loaded model and the magnification it runs at.
#[derive(Debug, Clone)]
pub struct ModelSlot {
    pub model: Unet<f32>,
    pub factor: f64,
}

/// Everything a tile worker needs; immutable while a run is in progress.
#[derive(Debug, Clone)]
pub struct Analyzer {
    pub detcls: ModelSlot,
    pub seg: Option<ModelSlot>,
    pub thresholds: Thresholds,
    pub halo: u64,
    pub interior: u64,
    pub heatmap_um: f64,
    /// Time spent loading models.
    pub setup: Duration,
}

/// Smallest level-0 offset that is a whole number of pooling blocks at
/// `factor` for a `levels`-deep network.
pub fn alignment_for(factor: f64, levels: usize) -> Result<u64> {
    let block = (1u64 << levels) as f64;
    for a in 1..=1u64 << 16 {
        let v = a as f64 * factor / block;
        if (v - v.round()).abs() < 1e-9 && v.round() >= 1.0 {
            return Ok(a);
        }
    }
    Err(PipelineError::Config(format!("resize factor {factor} has no tile alignment")))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl Analyzer {
    pub fn new(detcls: ModelSlot, seg: Option<ModelSlot>, thresholds: Thresholds) -> Result<Self> {
        let a = Self {
            detcls,
            seg,
            thresholds,
            halo: DEFAULT_HALO,
            interior: DEFAULT_INTERIOR,
            heatmap_um: DEFAULT_HEATMAP_UM,
            setup: Duration::ZERO,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let start = Instant::now();
        let (det, _) = load_checkpoint(&cfg.detcls.weights, Some(ModelKind::DetCls))?;
        let seg = match &cfg.seg {
            Some(s) => Some(ModelSlot { model: load_checkpoint(&s.weights, Some(ModelKind::Seg))?.0, factor: s.factor }),
            None => None,
        };
        let mut a = Self::new(ModelSlot { model: det, factor: cfg.detcls.factor }, seg, cfg.thresholds)?;
        a.halo = cfg.halo;
        a.interior = cfg.interior;
        a.heatmap_um = cfg.heatmap_um;
        a.setup = start.elapsed();
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        self.thresholds.validate().map_err(PipelineError::Config)?;
        for slot in self.slots() {
            if !(slot.factor > 0.0 && slot.factor <= 1.0) {
                return Err(PipelineError::Config(format!("resize factor {} outside (0, 1]", slot.factor)));
            }
        }
        if self.detcls.model.config().out_maps != 2 {
            return Err(PipelineError::Config("detection model must have two output maps".into()));
        }
        if let Some(s) = &self.seg {
            if s.model.config().out_maps != 1 {
                return Err(PipelineError::Config("segmentation model must have one output map".into()));
            }
        }
        if self.interior == 0 || !(self.heatmap_um > 0.0) {
            return Err(PipelineError::Config("interior and heatmap cell size must be positive".into()));
        }
        Ok(())
    }

    fn slots(&self) -> impl Iterator<Item = &ModelSlot> {
        std::iter::once(&self.detcls).chain(self.seg.as_ref())
    }

    /// Level-0 step that keeps every model's pooling grid aligned.
    pub fn alignment(&self) -> Result<u64> {
        let mut l = 1;
        for s in self.slots() {
            let a = alignment_for(s.factor, s.model.config().levels)?;
            l = l / gcd(l, a) * a;
        }
        Ok(l)
    }

    /// Level-0 halo actually used: the configured halo, raised so that every
    /// model sees its full dependency reach (plus one pixel for peak tests
    /// and bilinear taps), rounded up to the alignment.
    pub fn effective_halo(&self) -> Result<u64> {
        let mut h = (self.halo as f64 / self.detcls.factor).ceil() as u64;
        for s in self.slots() {
            h = h.max(((s.model.config().reach() + 2) as f64 / s.factor).ceil() as u64);
        }
        let a = self.alignment()?;
        Ok(h.div_ceil(a) * a)
    }

    pub fn effective_interior(&self) -> Result<u64> {
        let a = self.alignment()?;
        Ok(self.interior.div_ceil(a) * a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileJob {
    pub index: usize,
    pub interior: Rect,
    pub padded: Rect,
}

/// Row-major tiles of side `interior` covering `region`; each padded rect
/// extends the interior by `halo` on every side, clipped to the region.
pub fn plan_tiles(region: &Rect, interior: u64, halo: u64) -> Vec<TileJob> {
    assert!(interior > 0, "interior size must be positive");
    let mut jobs = Vec::new();
    if region.is_empty() {
        return jobs;
    }
    let mut y = region.y;
    while y < region.bottom() {
        let h = interior.min(region.bottom() - y);
        let mut x = region.x;
        while x < region.right() {
            let w = interior.min(region.right() - x);
            let inner = Rect::new(x, y, w, h);
            let px = x.saturating_sub(halo).max(region.x);
            let py = y.saturating_sub(halo).max(region.y);
            let pr = (x + w + halo).min(region.right());
            let pb = (y + h + halo).min(region.bottom());
            jobs.push(TileJob { index: jobs.len(), interior: inner, padded: Rect::new(px, py, pr - px, pb - py) });
            x += w;
        }
        y += h;
    }
    jobs
}

/// Cumulative stage durations in seconds; shares are of `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub read_pixels: f64,
    pub model_inference: f64,
    pub save_result: f64,
    pub peak_detect: f64,
    pub model_setup: f64,
    /// Worker-seconds plus setup; the denominator of the shares.
    pub total: f64,
}

impl StageTiming {
    pub const STAGES: [&'static str; 5] = ["read_pixels", "model_inference", "save_result", "peak_detect", "model_setup"];

    pub fn stages(&self) -> [(&'static str, f64); 5] {
        [
            ("read_pixels", self.read_pixels),
            ("model_inference", self.model_inference),
            ("save_result", self.save_result),
            ("peak_detect", self.peak_detect),
            ("model_setup", self.model_setup),
        ]
    }

    pub fn shares(&self) -> Vec<(&'static str, f64)> {
        self.stages().iter().map(|&(n, v)| (n, if self.total > 0.0 { v / self.total } else { 0.0 })).collect()
    }

    fn add(&mut self, o: &StageTiming) {
        self.read_pixels += o.read_pixels;
        self.model_inference += o.model_inference;
        self.save_result += o.save_result;
        self.peak_detect += o.peak_detect;
        self.model_setup += o.model_setup;
        self.total += o.total;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    #[serde(flatten)]
    pub seconds: StageTiming,
    pub shares: std::collections::BTreeMap<String, f64>,
}

impl From<StageTiming> for TimingReport {
    fn from(t: StageTiming) -> Self {
        Self { seconds: t, shares: t.shares().into_iter().map(|(n, v)| (n.to_string(), v)).collect() }
    }
}

#[derive(Debug, Clone)]
pub struct TileResult {
    pub index: usize,
    pub cells: Vec<CellRecord>,
    pub clamped: usize,
    pub timing: StageTiming,
    /// Serialized cell list, the tile's persisted result.
    pub payload: Vec<u8>,
}

/// Reads the padded rect at each model's magnification, runs the models,
/// extracts cells and keeps those whose level-0 position lies in the
/// interior.
pub fn run_tile(job: &TileJob, slide: &SlidePyramid, an: &Analyzer) -> Result<TileResult> {
    let mut timing = StageTiming::default();
    let t = Instant::now();
    let det_read = slide.read_region(&job.padded, an.detcls.factor)?;
    let seg_read = an.seg.as_ref().map(|s| slide.read_region(&job.padded, s.factor)).transpose()?;
    timing.read_pixels += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let det_maps = an.detcls.model.forward_maps(&det_read.image)?;
    let seg_maps = match (&an.seg, &seg_read) {
        (Some(s), Some(r)) => Some(s.model.forward_maps(&r.image)?),
        _ => None,
    };
    timing.model_inference += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let origin = (job.padded.x, job.padded.y);
    let gd = GeoMap::new(&det_maps[0], origin, an.detcls.factor);
    let gc = GeoMap::new(&det_maps[1], origin, an.detcls.factor);
    let gs = match (&an.seg, &seg_maps) {
        (Some(s), Some(m)) => Some(GeoMap::new(&m[0], origin, s.factor)),
        _ => None,
    };
    let (cells, clamped) = extract_cells(&gd, &gc, gs.as_ref(), &an.thresholds);
    let cells: Vec<CellRecord> = cells
        .into_iter()
        .filter(|c| job.interior.contains_point(c.x as f64, c.y as f64))
        .map(|mut c| {
            c.tile = Some(job.index);
            c
        })
        .collect();
    timing.peak_detect += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let payload = serde_json::to_vec(&cells)?;
    timing.save_result += t.elapsed().as_secs_f64();
    Ok(TileResult { index: job.index, cells, clamped, timing, payload })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub n: usize,
    pub n_tumor: usize,
    pub tcr: f64,
    pub empty: bool,
}

/// Square-cell ratio grid over a region, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub origin_x: u64,
    pub origin_y: u64,
    pub cell_side_um: f64,
    pub cell_side_px: f64,
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<HeatCell>,
}

pub fn build_heatmap(cells: &[CellRecord], region: &Rect, cell_side_um: f64, mpp: f64) -> HeatmapGrid {
    assert!(cell_side_um > 0.0 && mpp > 0.0, "heatmap cell size and mpp must be positive");
    let side = cell_side_um / mpp;
    let cols = ((region.w as f64 / side).ceil() as usize).max(1);
    let rows = ((region.h as f64 / side).ceil() as usize).max(1);
    let mut counts = vec![(0usize, 0usize); cols * rows];
    for c in cells {
        if !region.contains_point(c.x as f64, c.y as f64) {
            continue;
        }
        let col = (((c.x - region.x) as f64 / side) as usize).min(cols - 1);
        let row = (((c.y - region.y) as f64 / side) as usize).min(rows - 1);
        let e = &mut counts[row * cols + col];
        e.0 += 1;
        e.1 += usize::from(c.class == CellClass::Tumor);
    }
    HeatmapGrid {
        origin_x: region.x,
        origin_y: region.y,
        cell_side_um,
        cell_side_px: side,
        cols,
        rows,
        cells: counts
            .into_iter()
            .map(|(n, t)| HeatCell { n, n_tumor: t, tcr: if n == 0 { 0.0 } else { t as f64 / n as f64 }, empty: n == 0 })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileFailure {
    pub index: usize,
    pub error: String,
}

/// Result of a whole-region run. `cells` is sorted by `(y, x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub region: Rect,
    pub overall_tcr: f64,
    pub n_cells: usize,
    pub n_tumor: usize,
    pub empty: bool,
    pub cells: Vec<CellRecord>,
    pub heatmap: HeatmapGrid,
    pub timing: TimingReport,
    pub throughput_mm2_s: f64,
    pub area_mm2: f64,
    pub tiles: usize,
    pub workers: usize,
    pub clamped_samples: usize,
    pub failures: Vec<TileFailure>,
    pub partial: bool,
}

impl PipelineOutput {
    /// Serialization of everything that must not depend on scheduling:
    /// ratio, counts, cells (without tile ids) and heatmap.
    pub fn deterministic_bytes(&self) -> Vec<u8> {
        let cells: Vec<CellRecord> = self.cells.iter().map(|c| CellRecord { tile: None, ..c.clone() }).collect();
        serde_json::to_vec(&(self.overall_tcr, self.n_cells, self.n_tumor, &cells, &self.heatmap))
            .expect("plain data serializes")
    }
}

pub type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

/// Runs every tile of `region` on `workers` threads pulling from a shared
/// job counter. Results are merged by tile index, so the output does not
/// depend on completion order. Failed tiles are listed and the output is
/// marked partial.
pub fn run_pipeline(
    slide: &SlidePyramid,
    region: &Rect,
    an: &Analyzer,
    workers: usize,
    progress: Option<Progress>,
) -> Result<PipelineOutput> {
    if region.is_empty() || !slide.bounds().contains(region) {
        return Err(PipelineError::Region { region: *region, width: slide.width(), height: slide.height() });
    }
    let workers = workers.max(1);
    let jobs = plan_tiles(region, an.effective_interior()?, an.effective_halo()?);
    let total = jobs.len();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<TileResult>, f64)>();
    let mut results: Vec<Option<std::result::Result<TileResult, String>>> = (0..total).map(|_| None).collect();
    let mut worker_seconds = 0.0;
    let wall = Instant::now();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(total.max(1)) {
            let tx = tx.clone();
            let (jobs, next) = (&jobs, &next);
            scope.spawn(move || {
                let mut last = Instant::now();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run_tile(&jobs[i], slide, an);
                    let busy = last.elapsed().as_secs_f64();
                    last = Instant::now();
                    if tx.send((i, r, busy)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut done = 0;
        for (i, r, busy) in rx {
            worker_seconds += busy;
            results[i] = Some(r.map_err(|e| PipelineError::Tile { index: i, source: Box::new(e) }.to_string()));
            done += 1;
            if let Some(p) = progress {
                p(done, total);
            }
        }
    });
    let elapsed = wall.elapsed().as_secs_f64();

    let mut timing = StageTiming::default();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut clamped = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r.expect("every job reports") {
            Ok(t) => {
                timing.add(&t.timing);
                clamped += t.clamped;
                cells.extend(t.cells);
            }
            Err(error) => failures.push(TileFailure { index: i, error }),
        }
    }
    timing.total = worker_seconds;
    timing.model_setup = an.setup.as_secs_f64();
    timing.total += timing.model_setup;
    cells.sort_by_key(|c| (c.y, c.x));
    let summary = compute_tcr(cells.iter().map(|c| &c.class));
    let heatmap = build_heatmap(&cells, region, an.heatmap_um, slide.mpp());
    let area_mm2 = region.w as f64 * region.h as f64 * slide.mpp() * slide.mpp() / 1e6;
    Ok(PipelineOutput {
        region: *region,
        overall_tcr: summary.tcr,
        n_cells: summary.total,
        n_tumor: summary.tumor,
        empty: summary.empty,
        cells,
        heatmap,
        timing: timing.into(),
        throughput_mm2_s: if elapsed > 0.0 { area_mm2 / elapsed } else { 0.0 },
        area_mm2,
        tiles: total,
        workers,
        clamped_samples: clamped,
        partial: !failures.is_empty(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_example() {
        let jobs = plan_tiles(&Rect::new(0, 0, 1000, 1000), 500, 94);
        assert_eq!(jobs.len(), 4);
        let origins: Vec<(u64, u64)> = jobs.iter().map(|j| (j.interior.x, j.interior.y)).collect();
        assert_eq!(origins, vec![(0, 0), (500, 0), (0, 500), (500, 500)]);
        assert_eq!(jobs[0].padded, Rect::new(0, 0, 594, 594));
        assert_eq!(jobs[3].padded, Rect::new(406, 406, 594, 594));
        let one = plan_tiles(&Rect::new(10, 20, 300, 200), 500, 94);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].interior, Rect::new(10, 20, 300, 200));
        assert_eq!(one[0].padded, one[0].interior);
    }

    #[test]
    fn alignments() {
        assert_eq!(alignment_for(0.5, 3).unwrap(), 16);
        assert_eq!(alignment_for(0.25, 3).unwrap(), 32);
        assert_eq!(alignment_for(1.0, 3).unwrap(), 8);
        assert_eq!(alignment_for(0.6, 3).unwrap(), 40);
    }

    #[test]
    fn heatmap_counts() {
        let cell = |x, class| CellRecord { x, y: 5, i_d: 1.0, i_c: 0.0, i_s: 0.0, score: 0.0, class, tile: None };
        let cells = [cell(1, CellClass::Tumor), cell(2, CellClass::Normal), cell(12, CellClass::Tumor), cell(13, CellClass::Tumor)];
        let g = build_heatmap(&cells, &Rect::new(0, 0, 20, 10), 2.5, 0.25);
        assert_eq!((g.cols, g.rows), (2, 1));
        assert_eq!((g.cells[0].n, g.cells[0].n_tumor, g.cells[0].tcr), (2, 1, 0.5));
        assert_eq!((g.cells[1].n, g.cells[1].n_tumor, g.cells[1].tcr), (2, 2, 1.0));
        let e = build_heatmap(&[], &Rect::new(0, 0, 20, 10), 2.5, 0.25);
        assert!(e.cells.iter().all(|c| c.empty));
    }
}
