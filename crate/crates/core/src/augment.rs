//! Appearance and geometry augmentation: H&E stain shifts in optical-density
//! space, HSL shifts, blur/sharpen, and the eight dihedral transforms.

use rand::Rng;

use crate::raster::{DensityMap, RgbImage};

/// Hematoxylin optical-density direction.
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
/// Eosin optical-density direction.
pub const EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("stain vectors do not span a 3-D basis (det {0:e})")]
    SingularBasis(f64),
    #[error("stain vector has zero length")]
    ZeroVector,
}

fn normalize(v: [f64; 3]) -> Result<[f64; 3], AugmentError> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(AugmentError::ZeroVector);
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Two unit stain directions plus the residual axis orthogonal to both.
/// Rows of `matrix` are the stains; `od = coeffs * matrix`.
#[derive(Debug, Clone, PartialEq)]
pub struct StainBasis {
    pub matrix: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

impl Default for StainBasis {
    fn default() -> Self {
        Self::new(HEMATOXYLIN, EOSIN).expect("standard H&E vectors are independent")
    }
}

impl StainBasis {
    pub fn new(h: [f64; 3], e: [f64; 3]) -> Result<Self, AugmentError> {
        let h = normalize(h)?;
        let e = normalize(e)?;
        let r = normalize(cross(h, e)).map_err(|_| AugmentError::SingularBasis(0.0))?;
        let m = [h, e, r];
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-6 {
            return Err(AugmentError::SingularBasis(det));
        }
        // columns of the inverse are the pairwise cross products over det
        let cols = [cross(m[1], m[2]), cross(m[2], m[0]), cross(m[0], m[1])];
        let mut inv = [[0.0; 3]; 3];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..3 {
                inv[i][j] = col[i] / det;
            }
        }
        Ok(Self { matrix: m, inverse: inv })
    }

    /// Stain coefficients `c` with `od = c * matrix`.
    pub fn project(&self, od: [f64; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = (0..3).map(|j| od[j] * self.inverse[j][k]).sum();
        }
        c
    }

    pub fn compose(&self, c: [f64; 3]) -> [f64; 3] {
        let mut od = [0.0; 3];
        for (j, o) in od.iter_mut().enumerate() {
            *o = (0..3).map(|k| c[k] * self.matrix[k][j]).sum();
        }
        od
    }
}

/// `-log10(max(I, 1) / 255)`.
pub fn optical_density(intensity: u8) -> f64 {
    -(f64::from(intensity.max(1)) / 255.0).log10()
}

fn from_od(od: f64) -> u8 {
    (255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8
}

/// Scales the hematoxylin and eosin coefficients of every pixel.
pub fn stain_shift(image: &RgbImage, h_factor: f64, e_factor: f64, basis: &StainBasis) -> RgbImage {
    let lut: Vec<f64> = (0..=255u8).map(optical_density).collect();
    let mut out = image.clone();
    for px in out.data.chunks_exact_mut(3) {
        let od = [lut[px[0] as usize], lut[px[1] as usize], lut[px[2] as usize]];
        let mut c = basis.project(od);
        c[0] *= h_factor;
        c[1] *= e_factor;
        let od = basis.compose(c);
        for ch in 0..3 {
            px[ch] = from_od(od[ch]);
        }
    }
    out
}

/// RGB in `[0,1]` to `(hue turns, saturation, lightness)`.
pub fn rgb_to_hsl(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = (max + min) / 2.0;
    if max == min {
        return [0.0, 0.0, l];
    }
    let d = max - min;
    let s = if l > 0.5 { d / (2.0 - max - min) } else { d / (max + min) };
    let h = if max == r {
        (g - b) / d + if g < b { 6.0 } else { 0.0 }
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    [h / 6.0, s, l]
}

pub fn hsl_to_rgb(hsl: [f64; 3]) -> [f64; 3] {
    let [h, s, l] = hsl;
    if s == 0.0 {
        return [l, l, l];
    }
    let q = if l < 0.5 { l * (1.0 + s) } else { l + s - l * s };
    let p = 2.0 * l - q;
    let channel = |t: f64| {
        let t = t.rem_euclid(1.0);
        if t < 1.0 / 6.0 {
            p + (q - p) * 6.0 * t
        } else if t < 0.5 {
            q
        } else if t < 2.0 / 3.0 {
            p + (q - p) * (2.0 / 3.0 - t) * 6.0
        } else {
            p
        }
    };
    [channel(h + 1.0 / 3.0), channel(h), channel(h - 1.0 / 3.0)]
}

/// Adds `d_hue` (turns, wrapping) and `d_sat`, `d_lum` (clamped to [0,1]).
pub fn hsl_shift(image: &RgbImage, d_hue: f64, d_sat: f64, d_lum: f64) -> RgbImage {
    let mut out = image.clone();
    for px in out.data.chunks_exact_mut(3) {
        let [h, s, l] = rgb_to_hsl([px[0], px[1], px[2]].map(|v| f64::from(v) / 255.0));
        let rgb = hsl_to_rgb([(h + d_hue).rem_euclid(1.0), (s + d_sat).clamp(0.0, 1.0), (l + d_lum).clamp(0.0, 1.0)]);
        for c in 0..3 {
            px[c] = (rgb[c] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Sampled Gaussian over `[-ceil(3σ), ceil(3σ)]`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders, in floating point.
fn blur_f64(image: &RgbImage, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (image.width as i64, image.height as i64);
    let src: Vec<f64> = image.data.iter().map(|&v| f64::from(v)).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x + i as i64 - r).clamp(0, w - 1);
                    s += kv * src[((y * w + xx) * 3 + c) as usize];
                }
                tmp[((y * w + x) * 3 + c) as usize] = s;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y + i as i64 - r).clamp(0, h - 1);
                    s += kv * tmp[((yy * w + x) * 3 + c) as usize];
                }
                out[((y * w + x) * 3 + c) as usize] = s;
            }
        }
    }
    out
}

fn quantize(values: &[f64], like: &RgbImage) -> RgbImage {
    RgbImage {
        width: like.width,
        height: like.height,
        data: values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Filter {
    /// Gaussian blur with this sigma in pixels.
    Blur(f64),
    /// Unsharp mask `I + amount * (I - blur_1px(I))`.
    Sharpen(f64),
}

pub fn blur_sharpen(image: &RgbImage, filter: Filter) -> RgbImage {
    match filter {
        Filter::Blur(sigma) => quantize(&blur_f64(image, sigma), image),
        Filter::Sharpen(amount) => {
            let b = blur_f64(image, 1.0);
            let v: Vec<f64> = image.data.iter().zip(&b).map(|(&i, &bl)| f64::from(i) + amount * (f64::from(i) - bl)).collect();
            quantize(&v, image)
        }
    }
}

/// One of the eight symmetries of the square: `k = 4 * mirror + quarter
/// turns`. The mirror (x -> w-1-x) is applied before the clockwise turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn inverse(self) -> Dihedral {
        if self.0 >= 4 {
            self
        } else {
            Dihedral((4 - self.0) % 4)
        }
    }

    /// Output `(width, height)` for an input of the given size.
    pub fn dims(self, w: usize, h: usize) -> (usize, usize) {
        if self.0 % 2 == 1 {
            (h, w)
        } else {
            (w, h)
        }
    }

    /// Where input position `(x, y)` of a `w x h` raster lands. Works on
    /// continuous coordinates with pixel centers at integers.
    pub fn map_point(self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (mut x, mut y) = if self.0 >= 4 { ((w - 1) as f64 - x, y) } else { (x, y) };
        let (mut cw, mut ch) = (w, h);
        for _ in 0..self.0 % 4 {
            // clockwise quarter turn of a cw x ch raster
            (x, y) = ((ch - 1) as f64 - y, x);
            (cw, ch) = (ch, cw);
        }
        debug_assert_eq!((cw, ch), self.dims(w, h));
        (x, y)
    }

    fn apply_raw<P: Copy>(self, data: &[P], w: usize, h: usize, channels: usize) -> Vec<P> {
        let (ow, _) = self.dims(w, h);
        let mut out = data.to_vec();
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = self.map_point(x as f64, y as f64, w, h);
                let (nx, ny) = (nx as usize, ny as usize);
                let src = (y * w + x) * channels;
                let dst = (ny * ow + nx) * channels;
                out[dst..dst + channels].copy_from_slice(&data[src..src + channels]);
            }
        }
        out
    }

    pub fn apply_image(self, image: &RgbImage) -> RgbImage {
        let (w, h) = self.dims(image.width, image.height);
        RgbImage { width: w, height: h, data: self.apply_raw(&image.data, image.width, image.height, 3) }
    }

    pub fn apply_map(self, map: &DensityMap) -> DensityMap {
        let (w, h) = self.dims(map.width, map.height);
        DensityMap { width: w, height: h, data: self.apply_raw(&map.data, map.width, map.height, 1) }
    }
}

/// Per-sample augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub h_factor: f64,
    pub e_factor: f64,
    pub d_hue: f64,
    pub d_sat: f64,
    pub d_lum: f64,
    pub filter: Filter,
    pub dihedral: Dihedral,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { h_factor: 1.0, e_factor: 1.0, d_hue: 0.0, d_sat: 0.0, d_lum: 0.0, filter: Filter::Blur(0.0), dihedral: Dihedral(0) }
    }

    /// Stain factors U[0.85,1.15], hue U[-0.02,0.02], saturation and
    /// lightness U[-0.1,0.1], then either a blur with σ U[0,0.8] or an
    /// unsharp mask with amount U[0,0.5], and a uniform dihedral transform.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let h_factor = rng.random_range(0.85..=1.15);
        let e_factor = rng.random_range(0.85..=1.15);
        let d_hue = rng.random_range(-0.02..=0.02);
        let d_sat = rng.random_range(-0.1..=0.1);
        let d_lum = rng.random_range(-0.1..=0.1);
        let filter = if rng.random_bool(0.5) {
            Filter::Blur(rng.random_range(0.0..=0.8))
        } else {
            Filter::Sharpen(rng.random_range(0.0..=0.5))
        };
        let dihedral = Dihedral(rng.random_range(0..8));
        Self { h_factor, e_factor, d_hue, d_sat, d_lum, filter, dihedral }
    }

    /// Color changes on the image only; the geometric transform on the
    /// image and every target map alike.
    pub fn apply(&self, image: &RgbImage, maps: &[DensityMap], basis: &StainBasis) -> (RgbImage, Vec<DensityMap>) {
        let mut img = stain_shift(image, self.h_factor, self.e_factor, basis);
        img = hsl_shift(&img, self.d_hue, self.d_sat, self.d_lum);
        img = blur_sharpen(&img, self.filter);
        let img = self.dihedral.apply_image(&img);
        (img, maps.iter().map(|m| self.dihedral.apply_map(m)).collect())
    }
}
