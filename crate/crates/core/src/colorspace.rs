//! sRGB <-> CIE Lab conversion (D65) and the image containers built on it.
//!
//! Pixels are stored as `f32` in `[0, 1]`; every conversion is evaluated in
//! `f64` so that storage precision is the only source of rounding error.
//! 8-bit quantization only happens at file I/O (see [`crate::io`]).

use std::sync::LazyLock;

use ndarray::{Array2, Array3, Axis};
use thiserror::Error;

/// Upper bound of the `a`/`b` channels.
pub const AB_MAX: f32 = 127.0;
/// Lower bound of the `a`/`b` channels.
pub const AB_MIN: f32 = -128.0;

// sRGB primaries with a D65 white, linear RGB -> XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

// D65 reference white, taken as the image of RGB white under the matrix so
// that (1, 1, 1) lands exactly on L = 100, a = b = 0.
pub(crate) const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

pub(crate) static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

const DELTA: f64 = 6.0 / 29.0;

// Values this far outside [0, 1] after Lab -> RGB count as clipped.
const GAMUT_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ColorError {
    #[error("pixel value {value} at ({y}, {x}, channel {c}) is outside [0, 1]")]
    Domain { y: usize, x: usize, c: usize, value: f32 },
    #[error("Lab value {value} at ({y}, {x}, channel {c}) is outside its valid range")]
    LabRange { y: usize, x: usize, c: usize, value: f32 },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("image must be at least 1x1")]
    Empty,
}

/// Gamma-encoded sRGB image, `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pixels: Array3<f32>,
}

impl RgbImage {
    pub fn new(pixels: Array3<f32>) -> Result<Self, ColorError> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(ColorError::Shape { expected: vec![h, w, 3], actual: vec![h, w, c] });
        }
        if h == 0 || w == 0 {
            return Err(ColorError::Empty);
        }
        for ((y, x, c), &value) in pixels.indexed_iter() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ColorError::Domain { y, x, c, value });
            }
        }
        Ok(Self { pixels: pixels.as_standard_layout().into_owned() })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self, ColorError> {
        let mut pixels = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    pixels[[y, x, c]] = px[c];
                }
            }
        }
        Self::new(pixels)
    }

    pub fn uniform(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self, ColorError> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    /// Values are clamped into `[0, 1]`; non-finite values become 0.
    pub fn from_clamped(mut pixels: Array3<f32>) -> Result<Self, ColorError> {
        pixels.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self::new(pixels)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        [self.pixels[[y, x, 0]], self.pixels[[y, x, 1]], self.pixels[[y, x, 2]]]
    }

    /// Snap every value onto the 8-bit grid, so a PNG round trip is lossless.
    pub fn quantized(&self) -> RgbImage {
        RgbImage { pixels: self.pixels.mapv(|v| (v * 255.0).round() / 255.0) }
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> RgbImage {
        let view = self.pixels.slice(ndarray::s![y0..y0 + height, x0..x0 + width, ..]);
        RgbImage { pixels: view.to_owned() }
    }

    /// True when every pixel has R = G = B.
    pub fn is_achromatic(&self) -> bool {
        self.pixels
            .lanes(Axis(2))
            .into_iter()
            .all(|px| px[0] == px[1] && px[1] == px[2])
    }
}

/// Image in CIE Lab: lightness `L` (`H x W`, in `[0, 100]`) and chroma `ab`
/// (`H x W x 2`, each in `[-128, 127]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    l: Array2<f32>,
    ab: Array3<f32>,
}

impl LabImage {
    pub fn new(l: Array2<f32>, ab: Array3<f32>) -> Result<Self, ColorError> {
        let (h, w) = l.dim();
        if ab.dim() != (h, w, 2) {
            let (ah, aw, ac) = ab.dim();
            return Err(ColorError::Shape { expected: vec![h, w, 2], actual: vec![ah, aw, ac] });
        }
        if h == 0 || w == 0 {
            return Err(ColorError::Empty);
        }
        for ((y, x), &value) in l.indexed_iter() {
            if !(0.0..=100.0).contains(&value) {
                return Err(ColorError::LabRange { y, x, c: 0, value });
            }
        }
        for ((y, x, c), &value) in ab.indexed_iter() {
            if !(AB_MIN..=AB_MAX).contains(&value) {
                return Err(ColorError::LabRange { y, x, c: c + 1, value });
            }
        }
        Ok(Self {
            l: l.as_standard_layout().into_owned(),
            ab: ab.as_standard_layout().into_owned(),
        })
    }

    /// Lightness only; chroma is zero.
    pub fn achromatic(l: Array2<f32>) -> Result<Self, ColorError> {
        let (h, w) = l.dim();
        Self::new(l, Array3::zeros((h, w, 2)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.l.dim()
    }

    pub fn lightness(&self) -> &Array2<f32> {
        &self.l
    }

    pub fn chroma(&self) -> &Array3<f32> {
        &self.ab
    }

    pub fn into_parts(self) -> (Array2<f32>, Array3<f32>) {
        (self.l, self.ab)
    }
}

/// Result of [`lab_to_rgb`]: the image plus how many pixels left the sRGB gamut.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbConversion {
    pub image: RgbImage,
    pub clipped_pixels: usize,
    /// Per-pixel flag, true where at least one channel was clipped.
    pub clip_mask: Array2<bool>,
}

impl RgbConversion {
    pub fn clipped(&self) -> bool {
        self.clipped_pixels > 0
    }

    pub fn clipped_fraction(&self) -> f64 {
        let (h, w) = self.image.dim();
        self.clipped_pixels as f64 / (h * w) as f64
    }
}

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    [
        [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
        [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
        [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
    ]
}

fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Single gamma-encoded sRGB triple to `[L, a, b]`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    if rgb[0] == rgb[1] && rgb[1] == rgb[2] {
        // Gray lies on the white axis: X/Xn = Y/Yn = Z/Zn, so a = b = 0.
        let t = lab_f(srgb_decode(rgb[0]));
        return [116.0 * t - 16.0, 0.0, 0.0];
    }
    let linear = rgb.map(srgb_decode);
    let xyz = mat_mul(&RGB_TO_XYZ, linear);
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Single `[L, a, b]` triple to gamma-encoded sRGB, without gamut clipping.
pub fn lab_to_srgb_unclipped(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    if lab[1] == 0.0 && lab[2] == 0.0 {
        return [srgb_encode(lab_f_inv(fy)); 3];
    }
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    let linear = mat_mul(&XYZ_TO_RGB, xyz);
    // Negative linear light has no gamma encoding; mirror it so the clip
    // detection below still sees the sign.
    linear.map(|c| if c < 0.0 { -srgb_encode(-c) } else { srgb_encode(c) })
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let (h, w) = img.dim();
    let mut l = Array2::zeros((h, w));
    let mut ab = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = img.get(y, x);
            let lab = srgb_to_lab([r as f64, g as f64, b as f64]);
            l[[y, x]] = lab[0].clamp(0.0, 100.0) as f32;
            ab[[y, x, 0]] = lab[1].clamp(AB_MIN as f64, AB_MAX as f64) as f32;
            ab[[y, x, 1]] = lab[2].clamp(AB_MIN as f64, AB_MAX as f64) as f32;
        }
    }
    LabImage { l, ab }
}

pub fn lab_to_rgb(lab: &LabImage) -> RgbConversion {
    let (h, w) = lab.dim();
    let mut pixels = Array3::zeros((h, w, 3));
    let mut clip_mask = Array2::from_elem((h, w), false);
    let mut clipped_pixels = 0;
    for y in 0..h {
        for x in 0..w {
            let rgb = lab_to_srgb_unclipped([
                lab.l[[y, x]] as f64,
                lab.ab[[y, x, 0]] as f64,
                lab.ab[[y, x, 1]] as f64,
            ]);
            let mut clipped = false;
            for c in 0..3 {
                if rgb[c] < -GAMUT_EPS || rgb[c] > 1.0 + GAMUT_EPS {
                    clipped = true;
                }
                pixels[[y, x, c]] = rgb[c].clamp(0.0, 1.0) as f32;
            }
            if clipped {
                clip_mask[[y, x]] = true;
                clipped_pixels += 1;
            }
        }
    }
    RgbConversion { image: RgbImage { pixels }, clipped_pixels, clip_mask }
}

/// Compose lightness and chroma planes and convert to RGB.
pub fn lab_parts_to_rgb(l: &Array2<f32>, ab: &Array3<f32>) -> Result<RgbConversion, ColorError> {
    let lab = LabImage::new(l.clone(), ab.clone())?;
    Ok(lab_to_rgb(&lab))
}

/// Gray RGB rendering of a lightness plane (zero chroma); never clips.
pub fn gray_from_lightness(l: &Array2<f32>) -> Result<RgbImage, ColorError> {
    Ok(lab_to_rgb(&LabImage::achromatic(l.clone())?).image)
}

/// `L` channel of the image rescaled to `[0, 1]`.
pub fn luminance_of(img: &RgbImage) -> Array2<f32> {
    rgb_to_lab(img).l.mapv(|v| v / 100.0)
}
