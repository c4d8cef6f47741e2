//! Training target maps: unit-height nucleus peaks and filled tumor areas.

use crate::annotations::{CellClass, PointAnnotation, Polygon, Rect};
use crate::raster::DensityMap;

/// Disk radius of a nucleus peak at 40X, in pixels.
pub const DISK_RADIUS_40X: f64 = 4.0;
/// Gaussian sigma of a nucleus peak at 40X, in pixels.
pub const SIGMA_40X: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointMode {
    All,
    TumorOnly,
}

/// Disk blurred by a Gaussian truncated at 3σ, sampled at integer offsets
/// and scaled so the center is exactly 1.
#[derive(Debug, Clone)]
pub struct PeakKernel {
    half: i64,
    values: Vec<f32>,
}

impl PeakKernel {
    /// Kernel at magnification `factor` relative to 40X (0.5 = 20X).
    pub fn for_factor(factor: f64) -> Self {
        Self::new(DISK_RADIUS_40X * factor, SIGMA_40X * factor)
    }

    pub fn new(disk_radius: f64, sigma: f64) -> Self {
        let cut = 3.0 * sigma;
        let half = (disk_radius + cut).ceil() as i64;
        // midpoint quadrature over the disk
        let step = (disk_radius / 40.0).clamp(0.01, 0.1);
        let n = (disk_radius / step).ceil() as i64;
        let mut samples = Vec::new();
        for i in -n..n {
            for j in -n..n {
                let (u, v) = ((i as f64 + 0.5) * step, (j as f64 + 0.5) * step);
                if u * u + v * v <= disk_radius * disk_radius {
                    samples.push((u, v));
                }
            }
        }
        let side = (2 * half + 1) as usize;
        let mut raw = vec![0.0f64; side * side];
        for dy in -half..=half {
            for dx in -half..=half {
                let mut s = 0.0;
                for &(u, v) in &samples {
                    let (ex, ey) = (dx as f64 - u, dy as f64 - v);
                    let r2 = ex * ex + ey * ey;
                    if r2 <= cut * cut {
                        s += (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                }
                raw[(dy + half) as usize * side + (dx + half) as usize] = s;
            }
        }
        let center = raw[half as usize * side + half as usize];
        let values = raw.iter().map(|v| (v / center) as f32).collect();
        Self { half, values }
    }

    pub fn half_width(&self) -> i64 {
        self.half
    }

    pub fn at(&self, dx: i64, dy: i64) -> f32 {
        if dx.abs() > self.half || dy.abs() > self.half {
            return 0.0;
        }
        let side = 2 * self.half + 1;
        self.values[((dy + self.half) * side + dx + self.half) as usize]
    }
}

/// Continuous map coordinate of a level-0 pixel index when `origin` maps to
/// map pixel 0 and the map is scaled by `factor` (pixel centers at integers).
pub fn to_map_coord(level0: f64, origin: u64, factor: f64) -> f64 {
    (level0 - origin as f64 + 0.5) * factor - 0.5
}

/// Points inside `region`, moved into the map frame of that region.
pub fn points_to_map(points: &[PointAnnotation], region: &Rect, factor: f64) -> Vec<PointAnnotation> {
    points
        .iter()
        .filter(|p| region.contains_point(p.x, p.y))
        .map(|p| PointAnnotation {
            x: to_map_coord(p.x, region.x, factor),
            y: to_map_coord(p.y, region.y, factor),
            class: p.class,
        })
        .collect()
}

/// Polygons moved into the map frame of `region` (vertices are continuous
/// positions, so no half-pixel shift applies).
pub fn polygons_to_map(polygons: &[Polygon], region: &Rect, factor: f64) -> Vec<Polygon> {
    polygons
        .iter()
        .map(|poly| {
            poly.iter()
                .map(|&[x, y]| [(x - region.x as f64) * factor, (y - region.y as f64) * factor])
                .collect()
        })
        .collect()
}

/// Peak target for points given in map pixel coordinates. Each selected
/// point stamps `kernel` at its nearest pixel; overlaps combine by max.
/// Returns the map and the number of points skipped for lying outside it.
pub fn make_point_target(
    points: &[PointAnnotation],
    width: usize,
    height: usize,
    kernel: &PeakKernel,
    mode: PointMode,
) -> (DensityMap, usize) {
    let mut map = DensityMap::zeros(width, height);
    let mut skipped = 0;
    let h = kernel.half_width();
    for p in points {
        if mode == PointMode::TumorOnly && p.class != CellClass::Tumor {
            continue;
        }
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        if cx < 0 || cy < 0 || cx >= width as i64 || cy >= height as i64 {
            skipped += 1;
            continue;
        }
        for y in (cy - h).max(0)..=(cy + h).min(height as i64 - 1) {
            for x in (cx - h).max(0)..=(cx + h).min(width as i64 - 1) {
                let v = kernel.at(x - cx, y - cy);
                let i = y as usize * width + x as usize;
                if v > map.data[i] {
                    map.data[i] = v;
                }
            }
        }
    }
    (map, skipped)
}

/// Area target: 1 at pixels whose center lies inside any polygon under the
/// even-odd rule, 0 elsewhere. Polygons with fewer than three vertices are
/// skipped and counted.
pub fn make_area_target(polygons: &[Polygon], width: usize, height: usize) -> (DensityMap, usize) {
    let mut map = DensityMap::zeros(width, height);
    let mut skipped = 0;
    let mut xs = Vec::new();
    for poly in polygons {
        if poly.len() < 3 {
            skipped += 1;
            continue;
        }
        for row in 0..height {
            let yc = row as f64 + 0.5;
            xs.clear();
            for (i, a) in poly.iter().enumerate() {
                let b = poly[(i + 1) % poly.len()];
                if (a[1] <= yc) != (b[1] <= yc) {
                    xs.push(a[0] + (yc - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // pixels whose center x + 0.5 lies in [pair[0], pair[1])
                let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for x in start..end {
                    map.data[row * width + x] = 1.0;
                }
            }
        }
    }
    (map, skipped)
}
