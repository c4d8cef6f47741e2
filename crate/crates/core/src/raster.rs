//! Plain 8-bit RGB images and single-channel float maps.

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

/// Interleaved 8-bit RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the `w x h` window at `(x, y)`; the window must fit.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> RgbImage {
        assert!(x + w <= self.width && y + h <= self.height, "crop outside image");
        let mut out = RgbImage::new(w, h);
        for row in 0..h {
            let src = ((y + row) * self.width + x) * 3;
            out.data[row * w * 3..(row + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }

    /// Pastes `src` with its top-left corner at `(x, y)`; must fit.
    pub fn paste(&mut self, src: &RgbImage, x: usize, y: usize) {
        assert!(x + src.width <= self.width && y + src.height <= self.height, "paste outside image");
        for row in 0..src.height {
            let dst = ((y + row) * self.width + x) * 3;
            self.data[dst..dst + src.width * 3]
                .copy_from_slice(&src.data[row * src.width * 3..(row + 1) * src.width * 3]);
        }
    }

    /// Planar `(3, H, W)` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let hw = self.width * self.height;
        let mut planar = vec![0.0f32; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * hw + i] = f32::from(px[c]) / 255.0;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], planar).expect("planar length")
    }
}

/// Single-channel float map aligned pixel-for-pixel with an input image.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl std::fmt::Debug for DensityMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DensityMap({}x{})", self.width, self.height)
    }
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == width * height).then_some(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integers). Coordinates outside the map are clamped to the border; the
    /// flag reports whether clamping happened.
    pub fn bilinear(&self, x: f64, y: f64) -> (f64, bool) {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let clamped = x < 0.0 || y < 0.0 || x > max_x || y > max_y;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let v = |xx, yy| f64::from(self.get(xx, yy));
        let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
        let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
        (top * (1.0 - fy) + bottom * fy, clamped)
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> DensityMap {
        assert!(x + w <= self.width && y + h <= self.height, "crop outside map");
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            data.extend_from_slice(&self.data[row * self.width + x..row * self.width + x + w]);
        }
        DensityMap { width: w, height: h, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_midpoint_of_ramp() {
        let m = DensityMap::from_raw(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (v, clamped) = m.bilinear(0.5, 0.5);
        assert_eq!(v, 1.5);
        assert!(!clamped);
        assert_eq!(m.bilinear(0.5, 0.0).0, 0.5);
    }

    #[test]
    fn bilinear_clamps_outside() {
        let m = DensityMap::from_raw(2, 1, vec![0.25, 0.75]).unwrap();
        assert_eq!(m.bilinear(-3.0, 0.0), (0.25, true));
        assert_eq!(m.bilinear(9.0, 4.0), (0.75, true));
    }

    #[test]
    fn crop_and_paste_round_trip() {
        let mut img = RgbImage::new(5, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 7 % 251) as u8;
        }
        let c = img.crop(1, 2, 3, 2);
        assert_eq!(c.get(0, 0), img.get(1, 2));
        let mut blank = RgbImage::new(5, 4);
        blank.paste(&c, 1, 2);
        assert_eq!(blank.get(3, 3), img.get(3, 3));
    }

    #[test]
    fn tensor_is_planar_and_scaled() {
        let img = RgbImage::filled(2, 1, [255, 0, 51]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 1.0, 0.0, 0.0, 0.2, 0.2]);
    }
}
