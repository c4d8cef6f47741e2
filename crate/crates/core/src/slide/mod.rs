//! Multi-resolution slide pyramids stored as a directory of PPM tiles plus a
//! `manifest.json`, and region reads at arbitrary magnification.

pub mod ppm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationError, Annotations, Rect};
use crate::raster::RgbImage;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("slide i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("missing tile level {level} ({x}, {y})")]
    MissingTile { level: usize, x: u32, y: u32 },
    #[error("tile {file} fails its checksum (stored {stored:08x}, computed {computed:08x})")]
    Checksum { file: String, stored: u32, computed: u32 },
    #[error("tile {file}: {reason}")]
    Ppm { file: String, reason: String },
    #[error("empty image or region")]
    Empty,
    #[error("resize factor must be in (0, 1], got {0}")]
    Factor(f64),
    #[error("region {0:?} does not intersect the slide")]
    OutOfBounds(Rect),
    #[error(transparent)]
    Annotations(#[from] AnnotationError),
    #[error("synthetic slide parameters: {0}")]
    Synth(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SlideError + '_ {
    move |source| SlideError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub x: u32,
    pub y: u32,
    pub file: String,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub index: usize,
    pub width: u64,
    pub height: u64,
    /// Row-major tile grid.
    pub tiles: Vec<TileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub width: u64,
    pub height: u64,
    pub mpp: f64,
    pub tile_size: u32,
    pub levels: Vec<LevelEntry>,
}

impl Manifest {
    fn validate(&self) -> Result<(), SlideError> {
        let bad = |m: String| Err(SlideError::Manifest(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        if self.width == 0 || self.height == 0 || self.tile_size == 0 || !(self.mpp > 0.0) {
            return bad("zero dimension, tile size or mpp".into());
        }
        if self.levels.is_empty() {
            return bad("no levels".into());
        }
        let (mut w, mut h) = (self.width, self.height);
        let t = u64::from(self.tile_size);
        for (k, level) in self.levels.iter().enumerate() {
            if level.index != k || level.width != w || level.height != h {
                return bad(format!("level {k} has index {} and size {}x{}", level.index, level.width, level.height));
            }
            let (cols, rows) = (w.div_ceil(t), h.div_ceil(t));
            if level.tiles.len() as u64 != cols * rows {
                return bad(format!("level {k} lists {} tiles, expected {}", level.tiles.len(), cols * rows));
            }
            for (i, tile) in level.tiles.iter().enumerate() {
                let i = i as u64;
                if u64::from(tile.x) != i % cols || u64::from(tile.y) != i / cols {
                    return bad(format!("level {k} tile list is not row-major at entry {i}"));
                }
            }
            w = w.div_ceil(2);
            h = h.div_ceil(2);
        }
        Ok(())
    }
}

/// Result of a region read. `clipped` is set when the requested rectangle
/// extended past the slide and was cut to its bounds.
#[derive(Debug, Clone)]
pub struct RegionRead {
    pub image: RgbImage,
    pub rect: Rect,
    pub clipped: bool,
}

/// An opened, immutable pyramid. Reads go to disk each time, so concurrent
/// readers need no synchronization.
#[derive(Debug, Clone)]
pub struct SlidePyramid {
    dir: PathBuf,
    manifest: Manifest,
}

impl SlidePyramid {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, SlideError> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| SlideError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(Self { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn width(&self) -> u64 {
        self.manifest.width
    }

    pub fn height(&self) -> u64 {
        self.manifest.height
    }

    pub fn mpp(&self) -> f64 {
        self.manifest.mpp
    }

    pub fn level_count(&self) -> usize {
        self.manifest.levels.len()
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width(), self.height())
    }

    /// Ground truth stored next to the pyramid, if any.
    pub fn annotations(&self) -> Result<Option<Annotations>, SlideError> {
        let path = self.dir.join(ANNOTATIONS_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(Annotations::load(&path)?))
    }

    /// Checks that every tile exists and matches its checksum.
    pub fn verify(&self) -> Result<(), SlideError> {
        for level in &self.manifest.levels {
            for tile in &level.tiles {
                self.read_tile(level.index, tile.x, tile.y)?;
            }
        }
        Ok(())
    }

    pub fn read_tile(&self, level: usize, x: u32, y: u32) -> Result<RgbImage, SlideError> {
        let missing = || SlideError::MissingTile { level, x, y };
        let entry = self.manifest.levels.get(level).ok_or_else(missing)?;
        let cols = entry.width.div_ceil(u64::from(self.manifest.tile_size));
        if u64::from(x) >= cols {
            return Err(missing());
        }
        let tile = entry.tiles.get((u64::from(y) * cols + u64::from(x)) as usize).ok_or_else(missing)?;
        read_tile_file(&self.dir, tile)
    }

    /// Raw pixels of `rect` (in level pixels) at `level`; `rect` must lie
    /// inside the level.
    pub fn read_level(&self, level: usize, rect: &Rect) -> Result<RgbImage, SlideError> {
        let entry = &self.manifest.levels[level];
        if rect.is_empty() || rect.right() > entry.width || rect.bottom() > entry.height {
            return Err(SlideError::OutOfBounds(*rect));
        }
        let t = u64::from(self.manifest.tile_size);
        let mut out = RgbImage::new(rect.w as usize, rect.h as usize);
        for ty in rect.y / t..=(rect.bottom() - 1) / t {
            for tx in rect.x / t..=(rect.right() - 1) / t {
                let tile = self.read_tile(level, tx as u32, ty as u32)?;
                let tile_rect = Rect::new(tx * t, ty * t, tile.width as u64, tile.height as u64);
                let Some(common) = tile_rect.intersect(rect) else { continue };
                let part = tile.crop(
                    (common.x - tile_rect.x) as usize,
                    (common.y - tile_rect.y) as usize,
                    common.w as usize,
                    common.h as usize,
                );
                out.paste(&part, (common.x - rect.x) as usize, (common.y - rect.y) as usize);
            }
        }
        Ok(out)
    }

    /// Pyramid level used for `factor`: the finest one whose downsample does
    /// not exceed `1 / factor`.
    pub fn level_for(&self, factor: f64) -> usize {
        let mut level = 0;
        while level + 1 < self.level_count() && (1u64 << (level + 1)) as f64 * factor <= 1.0 + 1e-9 {
            level += 1;
        }
        level
    }

    /// Reads the level-0 rectangle `rect` scaled by `factor`. The output has
    /// `round(w * factor) x round(h * factor)` pixels; output pixel `i` is
    /// centered on level-0 position `x + (i + 0.5) / factor`, sampled
    /// bilinearly from [`Self::level_for`] with clamping at the level edge.
    /// Sampling uses absolute slide coordinates, so overlapping reads agree
    /// wherever they overlap on the output grid.
    pub fn read_region(&self, rect: &Rect, factor: f64) -> Result<RegionRead, SlideError> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(SlideError::Factor(factor));
        }
        let clipped_rect = rect.intersect(&self.bounds()).ok_or(SlideError::OutOfBounds(*rect))?;
        let clipped = clipped_rect != *rect;
        let rect = clipped_rect;
        let out_w = ((rect.w as f64 * factor).round() as usize).max(1);
        let out_h = ((rect.h as f64 * factor).round() as usize).max(1);
        let level = self.level_for(factor);
        let ds = (1u64 << level) as f64;
        let entry = &self.manifest.levels[level];
        let (lw, lh) = (entry.width as usize, entry.height as usize);

        let coords = |origin: u64, n: usize, limit: usize| -> Vec<(usize, usize, f64)> {
            (0..n)
                .map(|i| {
                    // written so that tiles whose origins differ by whole
                    // output pixels evaluate identical expressions
                    let u = ((origin as f64 * factor + i as f64 + 0.5) / (factor * ds) - 0.5)
                        .clamp(0.0, (limit - 1) as f64);
                    let i0 = u.floor() as usize;
                    let i1 = (i0 + 1).min(limit - 1);
                    (i0, i1, u - i0 as f64)
                })
                .collect()
        };
        let xs = coords(rect.x, out_w, lw);
        let ys = coords(rect.y, out_h, lh);
        let x_lo = xs.iter().map(|c| c.0).min().unwrap_or(0);
        let x_hi = xs.iter().map(|c| c.1).max().unwrap_or(0);
        let y_lo = ys.iter().map(|c| c.0).min().unwrap_or(0);
        let y_hi = ys.iter().map(|c| c.1).max().unwrap_or(0);
        let window = Rect::new(x_lo as u64, y_lo as u64, (x_hi - x_lo + 1) as u64, (y_hi - y_lo + 1) as u64);
        let src = self.read_level(level, &window)?;

        let mut image = RgbImage::new(out_w, out_h);
        for (j, &(y0, y1, fy)) in ys.iter().enumerate() {
            let (y0, y1) = (y0 - y_lo, y1 - y_lo);
            for (i, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (x0, x1) = (x0 - x_lo, x1 - x_lo);
                let (a, b, c, d) = (src.get(x0, y0), src.get(x1, y0), src.get(x0, y1), src.get(x1, y1));
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let top = f64::from(a[ch]) * (1.0 - fx) + f64::from(b[ch]) * fx;
                    let bottom = f64::from(c[ch]) * (1.0 - fx) + f64::from(d[ch]) * fx;
                    px[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
                }
                image.put(i, j, px);
            }
        }
        Ok(RegionRead { image, rect, clipped })
    }
}

fn tile_path(level: usize, x: u32, y: u32) -> String {
    format!("L{level}/{x}_{y}.ppm")
}

fn read_tile_file(dir: &Path, tile: &TileEntry) -> Result<RgbImage, SlideError> {
    let path = dir.join(&tile.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let computed = crc32fast::hash(&bytes);
    if computed != tile.crc32 {
        return Err(SlideError::Checksum { file: tile.file.clone(), stored: tile.crc32, computed });
    }
    ppm::decode(&bytes).map_err(|reason| SlideError::Ppm { file: tile.file.clone(), reason })
}

/// 2x box downsample with `(a + b + c + d + 2) / 4` rounding. Odd trailing
/// rows and columns are replicated.
pub fn downsample2(src: &RgbImage) -> RgbImage {
    let (w, h) = (src.width.div_ceil(2), src.height.div_ceil(2));
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        let (y0, y1) = (2 * y, (2 * y + 1).min(src.height - 1));
        for x in 0..w {
            let (x0, x1) = (2 * x, (2 * x + 1).min(src.width - 1));
            let (a, b, c, d) = (src.get(x0, y0), src.get(x1, y0), src.get(x0, y1), src.get(x1, y1));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let s = u16::from(a[ch]) + u16::from(b[ch]) + u16::from(c[ch]) + u16::from(d[ch]);
                px[ch] = ((s + 2) / 4) as u8;
            }
            out.put(x, y, px);
        }
    }
    out
}

/// Number of pyramid levels for a level-0 size: halving continues while the
/// larger dimension is at least one tile.
pub fn level_count_for(width: u64, height: u64, tile_size: u32) -> usize {
    let (mut w, mut h, mut n) = (width, height, 1);
    while w.max(h) >= u64::from(tile_size) && w.max(h) > 1 {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
        n += 1;
    }
    n
}

/// Builds a pyramid in `dir` from a level-0 image held in memory.
pub fn build_pyramid(image: &RgbImage, mpp: f64, tile_size: u32, dir: &Path) -> Result<SlidePyramid, SlideError> {
    build_pyramid_with(image.width as u64, image.height as u64, mpp, tile_size, dir, |r| {
        Ok(image.crop(r.x as usize, r.y as usize, r.w as usize, r.h as usize))
    })
}

/// Builds a pyramid whose level-0 tiles come from `render`, called once per
/// tile rectangle in row-major order. Coarser levels are derived from the
/// tiles already on disk, so memory stays bounded by a few tiles. The
/// manifest is written last; a crash leaves no manifest behind.
pub fn build_pyramid_with(
    width: u64,
    height: u64,
    mpp: f64,
    tile_size: u32,
    dir: &Path,
    mut render: impl FnMut(Rect) -> Result<RgbImage, SlideError>,
) -> Result<SlidePyramid, SlideError> {
    if width == 0 || height == 0 || tile_size == 0 {
        return Err(SlideError::Empty);
    }
    if !(mpp > 0.0) {
        return Err(SlideError::Manifest(format!("mpp must be positive, got {mpp}")));
    }
    let _ = fs::remove_file(dir.join(MANIFEST_FILE));
    let t = u64::from(tile_size);
    let n_levels = level_count_for(width, height, tile_size);
    let mut levels: Vec<LevelEntry> = Vec::with_capacity(n_levels);
    let (mut w, mut h) = (width, height);
    for k in 0..n_levels {
        let level_dir = dir.join(format!("L{k}"));
        fs::create_dir_all(&level_dir).map_err(io_err(&level_dir))?;
        let mut tiles = Vec::new();
        for ty in 0..h.div_ceil(t) {
            for tx in 0..w.div_ceil(t) {
                let rect = Rect::new(tx * t, ty * t, t.min(w - tx * t), t.min(h - ty * t));
                let image = if k == 0 {
                    let img = render(rect)?;
                    if (img.width as u64, img.height as u64) != (rect.w, rect.h) {
                        return Err(SlideError::Manifest(format!(
                            "renderer returned {}x{} for tile {rect:?}",
                            img.width, img.height
                        )));
                    }
                    img
                } else {
                    let prev = &levels[k - 1];
                    let src_rect = Rect::new(2 * rect.x, 2 * rect.y, 2 * rect.w, 2 * rect.h)
                        .intersect(&Rect::new(0, 0, prev.width, prev.height))
                        .expect("child tile inside parent level");
                    let src = assemble(dir, prev, t, &src_rect)?;
                    downsample2(&src)
                };
                let file = tile_path(k, tx as u32, ty as u32);
                let bytes = ppm::encode(&image);
                let path = dir.join(&file);
                fs::write(&path, &bytes).map_err(io_err(&path))?;
                tiles.push(TileEntry { x: tx as u32, y: ty as u32, file, crc32: crc32fast::hash(&bytes) });
            }
        }
        levels.push(LevelEntry { index: k, width: w, height: h, tiles });
        w = w.div_ceil(2);
        h = h.div_ceil(2);
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, width, height, mpp, tile_size, levels };
    let tmp = dir.join("manifest.json.tmp");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| SlideError::Manifest(e.to_string()))?;
    fs::write(&tmp, json).map_err(io_err(&tmp))?;
    let final_path = dir.join(MANIFEST_FILE);
    fs::rename(&tmp, &final_path).map_err(io_err(&final_path))?;
    Ok(SlidePyramid { dir: dir.to_path_buf(), manifest })
}

fn assemble(dir: &Path, level: &LevelEntry, t: u64, rect: &Rect) -> Result<RgbImage, SlideError> {
    let cols = level.width.div_ceil(t);
    let mut out = RgbImage::new(rect.w as usize, rect.h as usize);
    for ty in rect.y / t..=(rect.bottom() - 1) / t {
        for tx in rect.x / t..=(rect.right() - 1) / t {
            let tile = read_tile_file(dir, &level.tiles[(ty * cols + tx) as usize])?;
            let tile_rect = Rect::new(tx * t, ty * t, tile.width as u64, tile.height as u64);
            let common = tile_rect.intersect(rect).expect("tile overlaps rect");
            let part = tile.crop(
                (common.x - tile_rect.x) as usize,
                (common.y - tile_rect.y) as usize,
                common.w as usize,
                common.h as usize,
            );
            out.paste(&part, (common.x - rect.x) as usize, (common.y - rect.y) as usize);
        }
    }
    Ok(out)
}
