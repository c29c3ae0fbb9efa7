//! Training-time reference simulation.
//!
//! A simulated reference keeps the ground-truth chroma except inside a random
//! mask, where chroma from an unrelated donor image is pasted in:
//!
//! ```text
//! Y' = Y * (1 - M) + Y_fake * M,     R' = lab_to_rgb(X, Y')
//! ```
//!
//! The mask is a union of 1-4 rectangles and blobs whose total coverage is
//! drawn uniformly from a configured range.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::{lab_to_rgb, rgb_to_lab, ColorError, LabImage, RgbConversion, RgbImage};

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least 2 images to draw donors from, got {0}")]
    PoolTooSmall(usize),
    #[error(transparent)]
    Color(#[from] ColorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub regions_min: usize,
    pub regions_max: usize,
    /// Probability that a region is a blob rather than a rectangle.
    pub blob_probability: f64,
    /// Overrides the sampled coverage (e.g. 0 or 1 for degenerate masks).
    pub forced_coverage: Option<f64>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            coverage_min: 0.1,
            coverage_max: 0.6,
            regions_min: 1,
            regions_max: 4,
            blob_probability: 0.5,
            forced_coverage: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionShape {
    Rectangle,
    Blob,
}

/// One sampled region. Geometry is in pixels; `area_fraction` is the share
/// of the image the region was sized for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub shape: RegionShape,
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
    pub area_fraction: f64,
    // Blob outline: radius scales by 1 + amp * sin(lobes * theta + phase).
    lobes: u32,
    amp: f64,
    phase: f64,
}

impl RegionSpec {
    /// Normalized distance from the region center; <= 1 inside the nominal outline.
    fn distance(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.center.0) / self.half_extent.0;
        let dx = (x - self.center.1) / self.half_extent.1;
        match self.shape {
            RegionShape::Rectangle => dy.abs().max(dx.abs()),
            RegionShape::Blob => {
                let theta = dy.atan2(dx);
                let radius = 1.0 + self.amp * (self.lobes as f64 * theta + self.phase).sin();
                (dy * dy + dx * dx).sqrt() / radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationMask {
    /// 1 where donor chroma is used.
    pub mask: Array2<u8>,
    pub regions: Vec<RegionSpec>,
}

impl SimulationMask {
    pub fn coverage(&self) -> f64 {
        let on = self.mask.iter().filter(|&&m| m > 0).count();
        on as f64 / self.mask.len() as f64
    }

    pub fn uniform(h: usize, w: usize, value: u8) -> Self {
        Self { mask: Array2::from_elem((h, w), value.min(1)), regions: Vec::new() }
    }
}

/// Deterministic per `(h, w, seed, cfg)`.
pub fn sample_mask(h: usize, w: usize, seed: u64, cfg: &MaskConfig) -> SimulationMask {
    let total = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = match cfg.forced_coverage {
        Some(c) => c.clamp(0.0, 1.0),
        None if cfg.coverage_max > cfg.coverage_min => rng.gen_range(cfg.coverage_min..cfg.coverage_max),
        None => cfg.coverage_min,
    };
    let count = if cfg.forced_coverage.is_some() {
        (target * total as f64).round() as usize
    } else {
        let lo = (cfg.coverage_min * total as f64).ceil() as usize;
        let hi = ((cfg.coverage_max * total as f64).floor() as usize).max(lo);
        ((target * total as f64).round() as usize).clamp(lo, hi.min(total))
    };
    if count == 0 {
        return SimulationMask::uniform(h, w, 0);
    }
    if count >= total {
        return SimulationMask::uniform(h, w, 1);
    }

    let k = rng.gen_range(cfg.regions_min.max(1)..=cfg.regions_max.max(cfg.regions_min.max(1)));
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let weight_sum: f64 = weights.iter().sum();
    let regions: Vec<RegionSpec> = weights
        .iter()
        .map(|&wt| {
            let area_fraction = target * wt / weight_sum;
            let area = area_fraction * total as f64;
            let aspect = rng.gen_range(-0.7f64..0.7).exp();
            let shape = if rng.gen_bool(cfg.blob_probability.clamp(0.0, 1.0)) {
                RegionShape::Blob
            } else {
                RegionShape::Rectangle
            };
            let hy = match shape {
                RegionShape::Rectangle => (area / (4.0 * aspect)).sqrt(),
                RegionShape::Blob => (area / (PI * aspect)).sqrt(),
            };
            RegionSpec {
                shape,
                center: (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)),
                half_extent: (hy.max(0.5), (hy * aspect).max(0.5)),
                area_fraction,
                lobes: rng.gen_range(2..=5),
                amp: rng.gen_range(0.1..0.3),
                phase: rng.gen_range(0.0..2.0 * PI),
            }
        })
        .collect();

    // The mask is the `count` pixels nearest (in normalized distance) to any
    // region: a union of uniformly scaled copies of the regions with exact area.
    let mut scored: Vec<(f64, usize)> = (0..total)
        .map(|p| {
            let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            let d = regions.iter().map(|r| r.distance(y, x)).fold(f64::INFINITY, f64::min);
            (d, p)
        })
        .collect();
    scored.select_nth_unstable_by(count - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mask = Array2::zeros((h, w));
    for &(_, p) in &scored[..count] {
        mask[[p / w, p % w]] = 1;
    }
    SimulationMask { mask, regions }
}

/// `Y * (1 - M) + Y_fake * M`.
pub fn mix_chroma(y: &Array3<f32>, y_fake: &Array3<f32>, mask: &Array2<u8>) -> Result<Array3<f32>, SimulationError> {
    let (h, w, _) = y.dim();
    if y_fake.dim() != y.dim() || mask.dim() != (h, w) {
        return Err(SimulationError::Shape(format!(
            "Y {:?}, Y_fake {:?}, M {:?}",
            y.dim(),
            y_fake.dim(),
            mask.dim()
        )));
    }
    let mut out = y.clone();
    for ((yy, xx, c), v) in out.indexed_iter_mut() {
        let m = mask[[yy, xx]].min(1) as f32;
        *v = *v * (1.0 - m) + y_fake[[yy, xx, c]] * m;
    }
    Ok(out)
}

/// Simulated reference `R' = lab_to_rgb(X, Y')`, with gamut clipping reported.
pub fn simulate_reference(
    x: &Array2<f32>,
    y: &Array3<f32>,
    y_fake: &Array3<f32>,
    mask: &SimulationMask,
) -> Result<RgbConversion, SimulationError> {
    if x.dim() != (y.dim().0, y.dim().1) {
        return Err(SimulationError::Shape(format!("X {:?}, Y {:?}", x.dim(), y.dim())));
    }
    let mixed = mix_chroma(y, y_fake, &mask.mask)?;
    Ok(lab_to_rgb(&LabImage::new(x.clone(), mixed)?))
}

/// Bilinear resize of an `H x W x C` array (pixel-center aligned).
pub fn resize_bilinear(src: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (sh, sw, c) = src.dim();
    if (sh, sw) == (h, w) {
        return src.clone();
    }
    let mut out = Array3::zeros((h, w, c));
    let sy = sh as f64 / h as f64;
    let sx = sw as f64 / w as f64;
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = (fx - x0 as f64) as f32;
            for k in 0..c {
                let top = src[[y0, x0, k]] * (1.0 - tx) + src[[y0, x1, k]] * tx;
                let bottom = src[[y1, x0, k]] * (1.0 - tx) + src[[y1, x1, k]] * tx;
                out[[y, x, k]] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Ground truth plus its simulated reference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// Lightness `L`, `[0, 100]`.
    pub x: Array2<f32>,
    /// Ground-truth chroma.
    pub y: Array3<f32>,
    pub r_prime: RgbImage,
    pub mask: SimulationMask,
    /// Pool index of the image the fake chroma came from.
    pub donor: usize,
    pub clipped_pixels: usize,
}

/// Build one sample from a target and a donor image (resized to the target).
pub fn simulate_sample(
    target: &RgbImage,
    donor: &RgbImage,
    donor_id: usize,
    mask_seed: u64,
    cfg: &MaskConfig,
) -> Result<TrainingSample, SimulationError> {
    let (h, w) = target.dim();
    let (x, y) = rgb_to_lab(target).into_parts();
    let (_, donor_ab) = rgb_to_lab(donor).into_parts();
    let y_fake = resize_bilinear(&donor_ab, h, w);
    let mask = sample_mask(h, w, mask_seed, cfg);
    let sim = simulate_reference(&x, &y, &y_fake, &mask)?;
    Ok(TrainingSample { x, y, r_prime: sim.image, mask, donor: donor_id, clipped_pixels: sim.clipped_pixels })
}

/// One sample per pool image; each donor is drawn uniformly from the other images.
pub fn make_training_batch(
    images: &[RgbImage],
    rng_seed: u64,
    cfg: &MaskConfig,
) -> Result<Vec<TrainingSample>, SimulationError> {
    if images.len() < 2 {
        return Err(SimulationError::PoolTooSmall(images.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut donor = rng.gen_range(0..images.len() - 1);
            if donor >= i {
                donor += 1;
            }
            let mask_seed = rng.gen();
            simulate_sample(img, &images[donor], donor, mask_seed, cfg)
        })
        .collect()
}
