//! Hermetic stand-ins for the segmentation and semantic-synthesis models.
//!
//! The toy segmenter thresholds luminance into bands, one class per band.
//! The toy generator paints each segment with a color looked up from a
//! per-class palette, indexed by `seed mod palette_size`, plus a small
//! deterministic texture noise.

use ndarray::Array2;

use super::{BackendDescriptor, BackendFailure, BackendKind, Contract, Generator, LatentCode, Segmenter};
use super::adapters::{read_request, SubprocessMode};
use super::segmentation::SegmentationMap;
use crate::colorizer::lightness_of;
use crate::colorspace::RgbImage;
use crate::io;

/// Toy classes, darkest luminance band first.
pub const TOY_CLASSES: [(u32, &str); 4] = [(1, "ground"), (2, "foliage"), (3, "building"), (4, "sky")];

/// Built-in palette rows, indexed by class id (0 = unlabeled).
pub const TOY_PALETTE: [[[f32; 3]; 4]; 5] = [
    [[0.55, 0.50, 0.45], [0.40, 0.45, 0.50], [0.65, 0.60, 0.55], [0.35, 0.30, 0.28]],
    [[0.40, 0.28, 0.18], [0.55, 0.45, 0.30], [0.30, 0.30, 0.25], [0.62, 0.52, 0.40]],
    [[0.20, 0.45, 0.15], [0.45, 0.60, 0.20], [0.15, 0.30, 0.20], [0.60, 0.55, 0.15]],
    [[0.70, 0.35, 0.30], [0.80, 0.75, 0.65], [0.45, 0.45, 0.55], [0.60, 0.50, 0.35]],
    [[0.45, 0.65, 0.90], [0.90, 0.60, 0.40], [0.70, 0.80, 0.90], [0.30, 0.40, 0.65]],
];

pub const TOY_NOISE_AMPLITUDE: f32 = 0.02;

pub fn toy_class_name(class: u32) -> String {
    match TOY_CLASSES.iter().find(|(id, _)| *id == class) {
        Some((_, name)) => name.to_string(),
        None if class == 0 => "unlabeled".to_string(),
        None => format!("class {class}"),
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_unit(parts: &[u64]) -> f32 {
    let h = parts.iter().fold(0u64, |acc, &p| splitmix64(acc ^ p));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Palette entry `k` for `class`. Classes or entries outside the built-in
/// table get a hashed color with channels in `[0.15, 0.85]`.
pub fn palette_color(class: u32, k: usize) -> [f32; 3] {
    if let Some(row) = TOY_PALETTE.get(class as usize) {
        if let Some(color) = row.get(k) {
            return *color;
        }
    }
    let mut out = [0.0; 3];
    for (c, v) in out.iter_mut().enumerate() {
        *v = 0.15 + 0.7 * hash_unit(&[class as u64, k as u64, c as u64, 0x7a11e7]);
    }
    out
}

/// Luminance-band segmenter.
#[derive(Debug, Clone)]
pub struct ToySegmenter {
    /// Ascending luminance thresholds in `[0, 1]`; `k` thresholds give `k + 1` bands.
    pub thresholds: Vec<f32>,
}

impl Default for ToySegmenter {
    fn default() -> Self {
        Self { thresholds: vec![0.25, 0.5, 0.75] }
    }
}

impl ToySegmenter {
    /// Class id for a luminance value in `[0, 1]`.
    pub fn class_for(&self, luminance: f32) -> u32 {
        let band = self.thresholds.iter().filter(|&&t| luminance >= t).count();
        band as u32 + 1
    }
}

impl Segmenter for ToySegmenter {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor { kind: BackendKind::Segmenter, name: "toy".into(), contract: Contract::InProcess }
    }

    fn segment(&self, lightness: &Array2<f32>) -> Result<Array2<u32>, BackendFailure> {
        Ok(lightness.mapv(|l| self.class_for(l / 100.0)))
    }

    fn class_name(&self, class: u32) -> String {
        toy_class_name(class)
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Palette generator.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    pub palette_size: usize,
    pub noise_amplitude: f32,
}

impl Default for ToyGenerator {
    fn default() -> Self {
        Self { palette_size: 4, noise_amplitude: TOY_NOISE_AMPLITUDE }
    }
}

impl ToyGenerator {
    pub fn palette_index(&self, seed: u64) -> usize {
        (seed % self.palette_size.max(1) as u64) as usize
    }

    pub fn render(&self, seg: &SegmentationMap, z: &LatentCode) -> RgbImage {
        let k = self.palette_index(z.seed);
        let labels = seg.labels();
        RgbImage::from_fn(labels.nrows(), labels.ncols(), |y, x| {
            let class = seg.class_of(labels[[y, x]]).unwrap_or(0);
            let base = palette_color(class, k);
            let mut px = [0.0; 3];
            for c in 0..3 {
                let u = hash_unit(&[z.seed, y as u64, x as u64, c as u64]);
                px[c] = (base[c] + self.noise_amplitude * (2.0 * u - 1.0)).clamp(0.0, 1.0);
            }
            px
        })
        .expect("palette values are clamped")
    }
}

impl Generator for ToyGenerator {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor { kind: BackendKind::Generator, name: "toy".into(), contract: Contract::InProcess }
    }

    fn generate(&self, seg: &SegmentationMap, z: &LatentCode) -> Result<RgbImage, BackendFailure> {
        Ok(self.render(seg, z))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// `toy_generate` with the default palette size and noise amplitude.
pub fn toy_generate(seg: &SegmentationMap, z: &LatentCode) -> RgbImage {
    ToyGenerator::default().render(seg, z)
}

/// Answer one subprocess-contract request with the toy backends, so the
/// command adapter can be exercised end to end without external models.
pub fn toy_subprocess_response(request: &[u8]) -> Result<Vec<u8>, String> {
    let (header, png) = read_request(request)?;
    let expected = (header.height, header.width);
    let mismatch = |dim| format!("payload is {dim:?}, header says {expected:?}");
    let out = match header.mode {
        SubprocessMode::SegmentGray | SubprocessMode::SegmentRgb => {
            let img = io::decode_rgb(png).map_err(|e| e.to_string())?;
            if img.dim() != expected {
                return Err(mismatch(img.dim()));
            }
            let classes = ToySegmenter::default().segment(&lightness_of(&img)).map_err(|f| f.message)?;
            io::encode_labels_png(&classes)
        }
        SubprocessMode::Generate => {
            let classes = io::decode_labels_png(png).map_err(|e| e.to_string())?;
            if classes.dim() != expected {
                return Err(mismatch(classes.dim()));
            }
            let seg = SegmentationMap::from_class_map(&classes).map_err(|e| e.to_string())?;
            io::encode_png(&toy_generate(&seg, &LatentCode::from_seed(header.seed)))
        }
    };
    out.map_err(|e| e.to_string())
}
