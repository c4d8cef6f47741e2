//! Synthetic H&E-like slides with exact ground truth.
//!
//! Nuclei are placed by Poisson-disk sampling, tumor regions are smooth random
//! closed curves, and pixels are rendered in optical-density space from the
//! hematoxylin and eosin vectors. Every pixel is a pure function of its
//! absolute position and the cell list, so slides can be rendered tile by
//! tile at any size.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_pyramid_with, SlideError, SlidePyramid, ANNOTATIONS_FILE};
use crate::annotations::{Annotations, CellClass, PointAnnotation, Polygon, Rect};
use crate::augment::{EOSIN, HEMATOXYLIN};
use crate::raster::RgbImage;

/// Matching radius used during evaluation; the generator keeps cells further
/// apart than twice this.
pub const MATCH_RADIUS_UM: f64 = 3.2;
/// 40X scan resolution (4.4 px per micron).
pub const MPP_40X: f64 = 1.0 / 4.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: u64,
    pub height: u64,
    pub mpp: f64,
    pub tile_size: u32,
    pub min_spacing_um: f64,
    /// Fraction of Poisson-disk sites kept as cells outside / inside tumor.
    pub normal_density: f64,
    pub tumor_density: f64,
    pub normal_radius_um: (f64, f64),
    pub tumor_radius_um: (f64, f64),
    pub tumor_blobs: usize,
    pub blob_radius_um: (f64, f64),
    /// Share of tumor cells drawn with normal morphology (and half that share
    /// of normal cells drawn atypical), so that labels depend on context.
    pub ambiguous_fraction: f64,
    /// Share of the slide left as bare glass.
    pub glass_fraction: f64,
    /// Per-slide stain strength jitter, as a relative amplitude.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 1980,
            height: 1980,
            mpp: MPP_40X,
            tile_size: 512,
            min_spacing_um: 7.0,
            normal_density: 0.55,
            tumor_density: 0.9,
            normal_radius_um: (1.9, 2.5),
            tumor_radius_um: (2.7, 3.3),
            tumor_blobs: 2,
            blob_radius_um: (70.0, 140.0),
            ambiguous_fraction: 0.2,
            glass_fraction: 0.1,
            color_jitter: 0.08,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SlideError> {
        let err = |m: String| Err(SlideError::Synth(m));
        if self.width == 0 || self.height == 0 || self.tile_size == 0 || !(self.mpp > 0.0) {
            return err("slide size, tile size and mpp must be positive".into());
        }
        if !(self.min_spacing_um > 2.0 * MATCH_RADIUS_UM) {
            return err(format!(
                "minimum spacing {} um must exceed twice the matching radius ({} um)",
                self.min_spacing_um,
                2.0 * MATCH_RADIUS_UM
            ));
        }
        let max_r = self.normal_radius_um.1.max(self.tumor_radius_um.1);
        for (name, (lo, hi)) in [("normal", self.normal_radius_um), ("tumor", self.tumor_radius_um)] {
            if !(lo > 0.0 && lo <= hi) {
                return err(format!("{name} radius range ({lo}, {hi}) is invalid"));
            }
        }
        if 2.0 * max_r >= self.min_spacing_um {
            return err(format!(
                "nuclei up to {max_r} um radius overlap at {} um spacing",
                self.min_spacing_um
            ));
        }
        for (name, v) in [
            ("normal_density", self.normal_density),
            ("tumor_density", self.tumor_density),
            ("ambiguous_fraction", self.ambiguous_fraction),
            ("glass_fraction", self.glass_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.normal_density == 0.0 && self.tumor_density == 0.0 {
            return err("both densities are zero".into());
        }
        if !(self.blob_radius_um.0 > 0.0 && self.blob_radius_um.0 <= self.blob_radius_um.1) {
            return err("blob radius range is invalid".into());
        }
        if !(0.0..0.5).contains(&self.color_jitter) {
            return err(format!("color_jitter {} outside [0, 0.5)", self.color_jitter));
        }
        let margin = 2.0 * self.px(max_r) + 2.0;
        if (self.width as f64) <= 2.0 * margin || (self.height as f64) <= 2.0 * margin {
            return err("slide too small to hold a single nucleus".into());
        }
        Ok(())
    }

    fn px(&self, um: f64) -> f64 {
        um / self.mpp
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    /// Center in continuous level-0 coordinates (a pixel center).
    cx: f64,
    cy: f64,
    /// Semi-axes in pixels and orientation.
    a: f64,
    b: f64,
    angle: f64,
    hema: f64,
    eosin: f64,
    class: CellClass,
}

impl Cell {
    fn reach(&self) -> f64 {
        self.a * CYTO_SCALE + 2.0
    }
}

const CYTO_SCALE: f64 = 1.9;
const MASK_STEP: u64 = 16;

/// A generated slide before it is written to disk.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub params: SynthParams,
    pub annotations: Annotations,
    cells: Vec<Cell>,
    grid: CellGrid,
    tumor_mask: CoarseMask,
    stain_scale: [f64; 2],
    noise_seed: u64,
}

/// Exact ground-truth ratios reported for each ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTruth {
    pub rect: Rect,
    pub tumor: usize,
    pub total: usize,
    pub tcr: f64,
}

impl SyntheticSlide {
    pub fn generate(params: &SynthParams) -> Result<Self, SlideError> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let polygons: Vec<Polygon> = (0..params.tumor_blobs).map(|_| random_blob(params, &mut rng)).collect();
        let tumor_mask = CoarseMask::build(params.width, params.height, |x, y| inside_any(&polygons, x, y));
        let glass_seed = rng.random::<u64>();
        let stain_scale = [
            1.0 + params.color_jitter * rng.random_range(-1.0..=1.0),
            1.0 + params.color_jitter * rng.random_range(-1.0..=1.0),
        ];

        let max_r = params.px(params.normal_radius_um.1.max(params.tumor_radius_um.1));
        let margin = (2.0 * max_r).ceil() + 2.0;
        let sites = poisson_disk(
            params.width as f64 - 2.0 * margin,
            params.height as f64 - 2.0 * margin,
            params.px(params.min_spacing_um),
            &mut rng,
        );
        let mut cells = Vec::with_capacity(sites.len());
        for (sx, sy) in sites {
            // snap to a pixel center so annotations are integer pixel indices
            let ix = (sx + margin).floor();
            let iy = (sy + margin).floor();
            let (cx, cy) = (ix + 0.5, iy + 0.5);
            let keep: f64 = rng.random();
            let ambiguous: f64 = rng.random();
            let morph: [f64; 5] = rng.random();
            if glass_weight(glass_seed, params, cx, cy) > 0.5 {
                continue;
            }
            let class = if inside_any(&polygons, cx, cy) { CellClass::Tumor } else { CellClass::Normal };
            let density = match class {
                CellClass::Tumor => params.tumor_density,
                CellClass::Normal => params.normal_density,
            };
            if keep >= density {
                continue;
            }
            let looks_tumor = match class {
                CellClass::Tumor => ambiguous >= params.ambiguous_fraction,
                CellClass::Normal => ambiguous < params.ambiguous_fraction * 0.5,
            };
            let lerp = |(lo, hi): (f64, f64), t: f64| lo + (hi - lo) * t;
            let (a, ratio, hema) = if looks_tumor {
                (params.px(lerp(params.tumor_radius_um, morph[0])), lerp((0.55, 0.75), morph[1]), lerp((0.95, 1.2), morph[2]))
            } else {
                (params.px(lerp(params.normal_radius_um, morph[0])), lerp((0.82, 1.0), morph[1]), lerp((0.55, 0.75), morph[2]))
            };
            cells.push(Cell {
                cx,
                cy,
                a,
                b: a * ratio,
                angle: morph[3] * std::f64::consts::PI,
                hema,
                eosin: lerp((0.12, 0.22), morph[4]),
                class,
            });
        }

        let points = cells
            .iter()
            .map(|c| PointAnnotation { x: c.cx - 0.5, y: c.cy - 0.5, class: c.class })
            .collect();
        let (w, h) = (params.width, params.height);
        // four quadrants, a partition of the slide
        let rois = vec![
            Rect::new(0, 0, w / 2, h / 2),
            Rect::new(w / 2, 0, w - w / 2, h / 2),
            Rect::new(0, h / 2, w / 2, h - h / 2),
            Rect::new(w / 2, h / 2, w - w / 2, h - h / 2),
        ];
        let annotations = Annotations { mpp: params.mpp, points, polygons, rois };
        let grid = CellGrid::build(&cells, w, h);
        Ok(Self { params: params.clone(), annotations, cells, grid, tumor_mask, stain_scale, noise_seed: glass_seed })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Exact ratio for each annotated ROI.
    pub fn region_truth(&self) -> Vec<RegionTruth> {
        self.annotations
            .rois
            .iter()
            .map(|r| {
                let (tumor, total) = self.annotations.counts_in(r);
                RegionTruth { rect: *r, tumor, total, tcr: if total == 0 { 0.0 } else { tumor as f64 / total as f64 } }
            })
            .collect()
    }

    /// Renders the level-0 pixels of `rect`.
    pub fn render(&self, rect: &Rect) -> RgbImage {
        let (w, h) = (rect.w as usize, rect.h as usize);
        let mut od_h = vec![0.0f32; w * h];
        let mut od_e = vec![0.0f32; w * h];
        let mut glass = vec![0.0f32; w * h];
        let p = &self.params;
        for j in 0..h {
            for i in 0..w {
                let (x, y) = (rect.x as f64 + i as f64 + 0.5, rect.y as f64 + j as f64 + 0.5);
                let tumor = self.tumor_mask.sample(x, y);
                let tex = value_noise(self.noise_seed ^ 0x5eed, x / p.px(12.0), y / p.px(12.0));
                let g = glass_weight(self.noise_seed, p, x, y);
                let k = j * w + i;
                od_h[k] = ((0.05 + 0.07 * tumor + 0.03 * tex) * (1.0 - g)) as f32;
                od_e[k] = ((0.22 + 0.06 * tumor + 0.10 * tex) * (1.0 - g)) as f32;
                glass[k] = g as f32;
            }
        }
        for ci in self.grid.candidates(rect) {
            let c = &self.cells[ci];
            let reach = c.reach();
            let x0 = ((c.cx - reach).floor().max(rect.x as f64) as u64).max(rect.x);
            let y0 = ((c.cy - reach).floor().max(rect.y as f64) as u64).max(rect.y);
            let x1 = ((c.cx + reach).ceil() as u64).min(rect.right());
            let y1 = ((c.cy + reach).ceil() as u64).min(rect.bottom());
            let (sin, cos) = c.angle.sin_cos();
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - c.cx, y as f64 + 0.5 - c.cy);
                    let u = (dx * cos + dy * sin) / c.a;
                    let v = (-dx * sin + dy * cos) / c.b;
                    let d = (u * u + v * v).sqrt();
                    let nucleus = smoothstep(1.15, 0.85, d) * (0.45 + 0.55 * (1.0 - d * d).max(0.0));
                    let r = (dx * dx + dy * dy).sqrt() / (c.a * CYTO_SCALE);
                    let cyto = smoothstep(1.1, 0.7, r);
                    let k = (y - rect.y) as usize * w + (x - rect.x) as usize;
                    od_h[k] += (c.hema * nucleus) as f32;
                    od_e[k] += (c.eosin * cyto) as f32;
                }
            }
        }
        let mut out = RgbImage::new(w, h);
        let seed = self.noise_seed;
        for j in 0..h {
            for i in 0..w {
                let k = j * w + i;
                let (ax, ay) = (rect.x + i as u64, rect.y + j as u64);
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let noise = (hash_unit(seed, ax, ay, ch as u64) - 0.5) * 0.04;
                    let od = f64::from(od_h[k]) * self.stain_scale[0] * HEMATOXYLIN[ch]
                        + f64::from(od_e[k]) * self.stain_scale[1] * EOSIN[ch]
                        + 0.02 * f64::from(glass[k])
                        + noise;
                    px[ch] = (255.0 * 10f64.powf(-od.max(0.0))).round().clamp(0.0, 255.0) as u8;
                }
                out.put(i, j, px);
            }
        }
        out
    }

    /// Writes the pyramid and `annotations.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SlidePyramid, SlideError> {
        std::fs::create_dir_all(dir).map_err(super::io_err(dir))?;
        let ann = dir.join(ANNOTATIONS_FILE);
        self.annotations.save(&ann)?;
        build_pyramid_with(self.params.width, self.params.height, self.params.mpp, self.params.tile_size, dir, |r| {
            Ok(self.render(&r))
        })
    }
}

/// Generates a slide, writes it to `dir` and returns the pyramid, the ground
/// truth and the exact per-ROI ratios.
pub fn generate_synthetic_slide(
    params: &SynthParams,
    dir: &Path,
) -> Result<(SlidePyramid, Annotations, Vec<RegionTruth>), SlideError> {
    let slide = SyntheticSlide::generate(params)?;
    let pyramid = slide.write(dir)?;
    Ok((pyramid, slide.annotations.clone(), slide.region_truth()))
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn hash64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_unit(seed: u64, x: u64, y: u64, c: u64) -> f64 {
    let h = hash64(seed ^ hash64(x ^ hash64(y ^ hash64(c))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth lattice noise in [0, 1] with unit lattice spacing.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let corner = |dx: i64, dy: i64| {
        let (ix, iy) = (fx as i64 + dx, fy as i64 + dy);
        hash_unit(seed, ix as u64, iy as u64, 7)
    };
    let top = corner(0, 0) * (1.0 - sx) + corner(1, 0) * sx;
    let bottom = corner(0, 1) * (1.0 - sx) + corner(1, 1) * sx;
    top * (1.0 - sy) + bottom * sy
}

/// 1 on glass, 0 in tissue, with a soft rim.
fn glass_weight(seed: u64, p: &SynthParams, x: f64, y: f64) -> f64 {
    if p.glass_fraction <= 0.0 {
        return 0.0;
    }
    let n = value_noise(seed, x / p.px(60.0), y / p.px(60.0));
    // value noise is concentrated near 0.5; map the fraction to a cut roughly
    let cut = 0.5 - 0.55 * (0.5 - p.glass_fraction);
    smoothstep(cut + 0.02, cut - 0.02, n)
}

fn random_blob(p: &SynthParams, rng: &mut ChaCha8Rng) -> Polygon {
    let cx = rng.random_range(0.0..p.width as f64);
    let cy = rng.random_range(0.0..p.height as f64);
    let r = p.px(rng.random_range(p.blob_radius_um.0..=p.blob_radius_um.1));
    let harmonics: Vec<(f64, f64, f64)> =
        (2..=4).map(|k| (k as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..TAU))).collect();
    let n = 96;
    (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            let s: f64 = harmonics.iter().map(|&(k, a, ph)| a * (k * t + ph).cos()).sum();
            [cx + r * (1.0 + s) * t.cos(), cy + r * (1.0 + s) * t.sin()]
        })
        .collect()
}

/// Even-odd point-in-polygon test, unioned over polygons.
pub fn inside_any(polygons: &[Polygon], x: f64, y: f64) -> bool {
    polygons.iter().any(|poly| {
        let mut inside = false;
        for (i, a) in poly.iter().enumerate() {
            let b = poly[(i + 1) % poly.len()];
            if (a[1] <= y) != (b[1] <= y) && x < a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]) {
                inside = !inside;
            }
        }
        poly.len() >= 3 && inside
    })
}

/// Bridson's algorithm on `[0, w) x [0, h)` with minimum distance `r`.
fn poisson_disk(w: f64, h: f64, r: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let cell = r / std::f64::consts::SQRT_2;
    let (gw, gh) = ((w / cell).ceil() as usize + 1, (h / cell).ceil() as usize + 1);
    let mut grid = vec![usize::MAX; gw * gh];
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut active = Vec::new();
    let slot = |x: f64, y: f64| ((y / cell) as usize, (x / cell) as usize);
    let first = (rng.random_range(0.0..w), rng.random_range(0.0..h));
    let (gy, gx) = slot(first.0, first.1);
    grid[gy * gw + gx] = 0;
    points.push(first);
    active.push(0);
    while !active.is_empty() {
        let ai = rng.random_range(0..active.len());
        let (px, py) = points[active[ai]];
        let mut found = false;
        for _ in 0..30 {
            let rad = rng.random_range(r..2.0 * r);
            let ang = rng.random_range(0.0..TAU);
            let (x, y) = (px + rad * ang.cos(), py + rad * ang.sin());
            if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
                continue;
            }
            let (gy, gx) = slot(x, y);
            let mut ok = true;
            'scan: for ny in gy.saturating_sub(2)..(gy + 3).min(gh) {
                for nx in gx.saturating_sub(2)..(gx + 3).min(gw) {
                    let q = grid[ny * gw + nx];
                    if q != usize::MAX {
                        let (qx, qy) = points[q];
                        if (qx - x).powi(2) + (qy - y).powi(2) < r * r {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
            if ok {
                grid[gy * gw + gx] = points.len();
                active.push(points.len());
                points.push((x, y));
                found = true;
                break;
            }
        }
        if !found {
            active.swap_remove(ai);
        }
    }
    points
}

/// Inside/outside samples on a coarse lattice, interpolated bilinearly to a
/// soft weight. Lattice points are absolute, so tiles agree.
#[derive(Debug, Clone)]
struct CoarseMask {
    cols: usize,
    rows: usize,
    values: Vec<f32>,
}

impl CoarseMask {
    fn build(width: u64, height: u64, inside: impl Fn(f64, f64) -> bool) -> Self {
        let cols = (width / MASK_STEP + 2) as usize;
        let rows = (height / MASK_STEP + 2) as usize;
        let mut values = vec![0.0; cols * rows];
        for r in 0..rows {
            for c in 0..cols {
                let (x, y) = ((c as u64 * MASK_STEP) as f64, (r as u64 * MASK_STEP) as f64);
                values[r * cols + c] = if inside(x, y) { 1.0 } else { 0.0 };
            }
        }
        Self { cols, rows, values }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let gx = (x / MASK_STEP as f64).clamp(0.0, (self.cols - 1) as f64);
        let gy = (y / MASK_STEP as f64).clamp(0.0, (self.rows - 1) as f64);
        let (c0, r0) = (gx.floor() as usize, gy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.cols - 1), (r0 + 1).min(self.rows - 1));
        let (tx, ty) = (gx - c0 as f64, gy - r0 as f64);
        let v = |r: usize, c: usize| f64::from(self.values[r * self.cols + c]);
        let top = v(r0, c0) * (1.0 - tx) + v(r0, c1) * tx;
        let bottom = v(r1, c0) * (1.0 - tx) + v(r1, c1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Bucket index of cells by the area they paint, for tile rendering.
#[derive(Debug, Clone)]
struct CellGrid {
    bucket: u64,
    cols: usize,
    rows: usize,
    /// Cell indices per bucket, each list ascending so paint order is global.
    lists: Vec<Vec<usize>>,
}

impl CellGrid {
    const BUCKET: u64 = 128;

    fn build(cells: &[Cell], width: u64, height: u64) -> Self {
        let bucket = Self::BUCKET;
        let cols = width.div_ceil(bucket) as usize;
        let rows = height.div_ceil(bucket) as usize;
        let mut lists = vec![Vec::new(); cols * rows];
        for (i, c) in cells.iter().enumerate() {
            let reach = c.reach();
            let bx0 = ((c.cx - reach).max(0.0) as u64 / bucket) as usize;
            let by0 = ((c.cy - reach).max(0.0) as u64 / bucket) as usize;
            let bx1 = (((c.cx + reach) as u64 / bucket) as usize).min(cols - 1);
            let by1 = (((c.cy + reach) as u64 / bucket) as usize).min(rows - 1);
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    lists[by * cols + bx].push(i);
                }
            }
        }
        Self { bucket, cols, rows, lists }
    }

    fn candidates(&self, rect: &Rect) -> Vec<usize> {
        if rect.is_empty() {
            return Vec::new();
        }
        let bx0 = (rect.x / self.bucket) as usize;
        let by0 = (rect.y / self.bucket) as usize;
        let bx1 = (((rect.right() - 1) / self.bucket) as usize).min(self.cols - 1);
        let by1 = (((rect.bottom() - 1) / self.bucket) as usize).min(self.rows - 1);
        let mut out: Vec<usize> = Vec::new();
        for by in by0..=by1 {
            for bx in bx0..=bx1 {
                out.extend_from_slice(&self.lists[by * self.cols + bx]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}
