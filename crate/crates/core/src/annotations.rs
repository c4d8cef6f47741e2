//! Per-slide ground truth: nucleus points, tumor-area polygons and the ROIs
//! that were annotated.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellClass {
    Normal,
    Tumor,
}

/// Nucleus center in level-0 pixel indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
    pub class: CellClass,
}

/// Closed polygon with vertices in level-0 pixel coordinates (pixel `i`
/// spans `[i, i+1)`).
pub type Polygon = Vec<[f64; 2]>;

/// Axis-aligned rectangle in level-0 pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u64,
    pub y: u64,
    pub w: u64,
    pub h: u64,
}

impl Rect {
    pub fn new(x: u64, y: u64, w: u64, h: u64) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u64 {
        self.y + self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64 && y >= self.y as f64 && x < self.right() as f64 && y < self.bottom() as f64
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x = self.x.max(other.x);
        let y = self.y.max(other.y);
        let r = self.right().min(other.right());
        let b = self.bottom().min(other.bottom());
        (r > x && b > y).then(|| Rect::new(x, y, r - x, b - y))
    }

    /// Parses `X,Y,W,H`.
    pub fn parse(s: &str) -> Option<Rect> {
        let v: Vec<u64> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        match v.as_slice() {
            &[x, y, w, h] => Some(Rect::new(x, y, w, h)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    /// Microns per level-0 pixel.
    pub mpp: f64,
    pub points: Vec<PointAnnotation>,
    #[serde(default)]
    pub polygons: Vec<Polygon>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rois: Vec<Rect>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("annotation i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("annotation json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("annotation mpp must be positive, got {0}")]
    Mpp(f64),
}

impl Annotations {
    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        let a: Annotations = serde_json::from_slice(&std::fs::read(path)?)?;
        if !(a.mpp > 0.0) {
            return Err(AnnotationError::Mpp(a.mpp));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnotationError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn points_in(&self, region: &Rect) -> impl Iterator<Item = &PointAnnotation> + '_ {
        let region = *region;
        self.points.iter().filter(move |p| region.contains_point(p.x, p.y))
    }

    /// `(tumor, total)` point counts inside `region`.
    pub fn counts_in(&self, region: &Rect) -> (usize, usize) {
        self.points_in(region).fold((0, 0), |(t, n), p| (t + usize::from(p.class == CellClass::Tumor), n + 1))
    }

    /// Ground-truth tumor-cell ratio of `region`; `None` when it holds no cells.
    pub fn true_tcr(&self, region: &Rect) -> Option<f64> {
        let (t, n) = self.counts_in(region);
        (n > 0).then(|| t as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_parse_and_intersect() {
        let r = Rect::parse("10, 20,30,40").unwrap();
        assert_eq!(r, Rect::new(10, 20, 30, 40));
        assert!(Rect::parse("1,2,3").is_none());
        assert!(Rect::parse("-5,0,10,10").is_none());
        let s = Rect::new(30, 0, 100, 30);
        assert_eq!(r.intersect(&s), Some(Rect::new(30, 20, 10, 10)));
        assert_eq!(r.intersect(&Rect::new(0, 0, 5, 5)), None);
    }

    #[test]
    fn json_shape() {
        let a = Annotations {
            mpp: 0.25,
            points: vec![PointAnnotation { x: 3.0, y: 4.0, class: CellClass::Tumor }],
            polygons: vec![vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]],
            rois: vec![],
        };
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        assert_eq!(v["points"][0]["class"], "tumor");
        assert!(v.get("rois").is_none());
        let back: Annotations = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn tcr_from_points() {
        let p = |x, class| PointAnnotation { x, y: 1.0, class };
        let a = Annotations {
            mpp: 0.25,
            points: vec![p(1.0, CellClass::Tumor), p(2.0, CellClass::Normal), p(50.0, CellClass::Tumor)],
            polygons: vec![],
            rois: vec![],
        };
        assert_eq!(a.true_tcr(&Rect::new(0, 0, 10, 10)), Some(0.5));
        assert_eq!(a.true_tcr(&Rect::new(20, 20, 10, 10)), None);
    }
}
