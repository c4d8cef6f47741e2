//! From output maps to located, scored and classified cells.

use serde::{Deserialize, Serialize};

use crate::annotations::CellClass;
use crate::raster::DensityMap;

/// Local maximum of a detection map, in map pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub value: f32,
}

/// 3x3 local maxima with value at least `t_d`. A pixel qualifies when it is
/// no lower than any in-bounds neighbor and strictly higher than the
/// neighbors that precede it in row-major order, so a flat plateau yields
/// exactly one peak (its first pixel in scan order). Output is in scan order.
pub fn detect_peaks(map: &DensityMap, t_d: f64) -> Vec<Peak> {
    let (w, h) = (map.width, map.height);
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.data[y * w + x];
            if f64::from(v) < t_d {
                continue;
            }
            let mut is_peak = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = map.data[ny as usize * w + nx as usize];
                    let precedes = dy < 0 || (dy == 0 && dx < 0);
                    if n > v || (precedes && n == v) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push(Peak { x, y, value: v });
            }
        }
    }
    peaks
}

/// A map registered to the slide: map pixel `(i, j)` is centered on level-0
/// position `origin + (i + 0.5) / factor`.
#[derive(Debug, Clone, Copy)]
pub struct GeoMap<'a> {
    pub map: &'a DensityMap,
    pub origin: (u64, u64),
    pub factor: f64,
}

impl<'a> GeoMap<'a> {
    pub fn new(map: &'a DensityMap, origin: (u64, u64), factor: f64) -> Self {
        Self { map, origin, factor }
    }

    /// Continuous level-0 position of a map pixel center.
    pub fn to_level0(&self, px: f64, py: f64) -> (f64, f64) {
        (self.origin.0 as f64 + (px + 0.5) / self.factor, self.origin.1 as f64 + (py + 0.5) / self.factor)
    }

    /// Continuous map coordinate (pixel centers at integers) of a level-0 position.
    pub fn from_level0(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin.0 as f64) * self.factor - 0.5, (y - self.origin.1 as f64) * self.factor - 0.5)
    }

    /// Level-0 pixel index containing the center of map pixel `(px, py)`.
    pub fn level0_pixel(&self, px: usize, py: usize) -> (u64, u64) {
        let (x, y) = self.to_level0(px as f64, py as f64);
        (x.floor() as u64, y.floor() as u64)
    }
}

/// Feature vector of one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub i_d: f64,
    pub i_c: f64,
    pub i_s: f64,
}

/// Reads `I_c` at each peak pixel of `map_c` (registered like the detection
/// map) and `I_s` bilinearly from `map_s` at the same slide position. Without
/// `map_s`, `I_s` equals `I_c`. Returns the scores and how many `map_s`
/// samples fell outside the map and were clamped to its border.
pub fn sample_scores(peaks: &[Peak], map_c: &GeoMap, map_s: Option<&GeoMap>) -> (Vec<Scores>, usize) {
    let mut clamped = 0;
    let scores = peaks
        .iter()
        .map(|p| {
            let i_c = f64::from(map_c.map.get(p.x, p.y));
            let i_s = match map_s {
                None => i_c,
                Some(s) => {
                    let (x, y) = map_c.to_level0(p.x as f64, p.y as f64);
                    let (sx, sy) = s.from_level0(x, y);
                    let (v, was_clamped) = s.map.bilinear(sx, sy);
                    clamped += usize::from(was_clamped);
                    v
                }
            };
            Scores { i_d: f64::from(p.value), i_c, i_s }
        })
        .collect();
    (scores, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_d: f64,
    pub t_c: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.5
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { t_d: 0.5, t_c: 0.5, alpha: default_alpha() }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("t_d", self.t_d), ("t_c", self.t_c), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Fused classification score `alpha * I_c + (1 - alpha) * I_s`.
pub fn fused_score(s: &Scores, alpha: f64) -> f64 {
    alpha * s.i_c + (1.0 - alpha) * s.i_s
}

/// Tumor exactly when the fused score is strictly above `t_c`.
pub fn classify(s: &Scores, th: &Thresholds) -> (CellClass, f64) {
    let score = fused_score(s, th.alpha);
    (if score > th.t_c { CellClass::Tumor } else { CellClass::Normal }, score)
}

/// A detected cell in level-0 pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub x: u64,
    pub y: u64,
    #[serde(rename = "I_d")]
    pub i_d: f64,
    #[serde(rename = "I_c")]
    pub i_c: f64,
    #[serde(rename = "I_s")]
    pub i_s: f64,
    pub score: f64,
    pub class: CellClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<usize>,
}

impl CellRecord {
    pub fn scores(&self) -> Scores {
        Scores { i_d: self.i_d, i_c: self.i_c, i_s: self.i_s }
    }
}

/// Full per-map chain: peaks, scores, classes and level-0 positions.
/// Returns the cells and the clamped-sample count.
pub fn extract_cells(
    map_d: &GeoMap,
    map_c: &GeoMap,
    map_s: Option<&GeoMap>,
    th: &Thresholds,
) -> (Vec<CellRecord>, usize) {
    let peaks = detect_peaks(map_d.map, th.t_d);
    let (scores, clamped) = sample_scores(&peaks, map_c, map_s);
    let cells = peaks
        .iter()
        .zip(scores)
        .map(|(p, s)| {
            let (class, score) = classify(&s, th);
            let (x, y) = map_d.level0_pixel(p.x, p.y);
            CellRecord { x, y, i_d: s.i_d, i_c: s.i_c, i_s: s.i_s, score, class, tile: None }
        })
        .collect();
    (cells, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcrSummary {
    pub tcr: f64,
    pub tumor: usize,
    pub total: usize,
    /// No cells: the ratio is reported as 0.
    pub empty: bool,
}

impl TcrSummary {
    pub fn from_counts(tumor: usize, total: usize) -> Self {
        if total == 0 {
            Self { tcr: 0.0, tumor: 0, total: 0, empty: true }
        } else {
            Self { tcr: tumor as f64 / total as f64, tumor, total, empty: false }
        }
    }
}

pub fn compute_tcr<'a>(classes: impl IntoIterator<Item = &'a CellClass>) -> TcrSummary {
    let (mut tumor, mut total) = (0, 0);
    for c in classes {
        tumor += usize::from(*c == CellClass::Tumor);
        total += 1;
    }
    TcrSummary::from_counts(tumor, total)
}
