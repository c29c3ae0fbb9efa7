//! Inference path: warp the composed reference onto the input, predict ab
//! with the U-Net, and rebuild RGB around the untouched lightness.

pub mod checkpoint;
pub mod unet;
pub mod warp;

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, Device, Tensor};
use thiserror::Error;

use crate::colorspace::{lab_parts_to_rgb, rgb_to_lab, ColorError, RgbConversion, RgbImage, AB_MAX, AB_MIN};
use crate::features::{natural_key, ExtractorConfig, FeatureError, Vgg19};
use crate::simulation::resize_bilinear;
use crate::tensors::{hwc_to_tensor, plane_to_tensor, tensor_to_hwc, tensor_to_plane};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Manifest};
pub use unet::{UNet, UNetConfig, DOWNSAMPLE_FACTOR};
pub use warp::{warp_tensors, WarpConfig, WarpTensors};

/// Network input is `[L / L_SCALE + L_OFFSET, ab / AB_SCALE, confidence]`.
pub const L_SCALE: f64 = 50.0;
pub const L_OFFSET: f64 = -1.0;
pub const AB_SCALE: f64 = 110.0;

#[derive(Debug, Error)]
pub enum ColorizeError {
    #[error("shape mismatch: input {input:?}, {what} {other:?}")]
    Shape { input: (usize, usize), what: &'static str, other: (usize, usize) },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Color(#[from] ColorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub unet: UNetConfig,
    pub warp: WarpConfig,
    /// Seed of the U-Net initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorConfig::default(),
            unet: UNetConfig::default(),
            warp: WarpConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow extractor and U-Net sized for single-core CPU runs.
    pub fn desk() -> Self {
        ModelConfig { extractor: ExtractorConfig::desk(), unet: UNetConfig::desk(), ..Self::default() }
    }
}

/// Aligned reference chroma `(H, W, 2)` and per-pixel confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedReference {
    pub warped_chroma: Array3<f32>,
    pub confidence: Array2<f32>,
}

impl WarpedReference {
    pub fn dim(&self) -> (usize, usize) {
        self.confidence.dim()
    }

    fn to_tensors(&self) -> WarpTensors {
        WarpTensors { chroma: hwc_to_tensor(&self.warped_chroma), confidence: plane_to_tensor(&self.confidence) }
    }
}

/// Frozen feature extractor plus the trainable U-Net. Parameters are not
/// `Sync`; share a model across threads behind a lock.
pub struct ColorizerModel {
    config: ModelConfig,
    extractor: Vgg19,
    unet_vs: nn::VarStore,
    unet: UNet,
}

impl std::fmt::Debug for ColorizerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ColorizerModel").field("config", &self.config).finish_non_exhaustive()
    }
}

impl ColorizerModel {
    pub fn new(config: &ModelConfig) -> Result<Self, ColorizeError> {
        let extractor = Vgg19::new(&config.extractor)?;
        let unet_vs = nn::VarStore::new(Device::Cpu);
        let unet = UNet::new(&unet_vs.root(), &config.unet);
        normal_init(&unet_vs, config.init_seed);
        Ok(ColorizerModel { config: config.clone(), extractor, unet_vs, unet })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn extractor(&self) -> &Vgg19 {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut Vgg19 {
        &mut self.extractor
    }

    pub fn unet_var_store(&self) -> &nn::VarStore {
        &self.unet_vs
    }

    pub fn unet_var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.unet_vs
    }

    pub fn zero_output(&mut self) {
        self.unet.zero_output();
    }

    /// Batched prediction in ab units, `(N, 2, H, W)`, gradients tracked.
    /// Unbounded; inference clamps to the ab range. Sides must be multiples
    /// of [`DOWNSAMPLE_FACTOR`].
    pub fn forward(&self, l: &Tensor, warp: &WarpTensors) -> Tensor {
        let x = Tensor::cat(
            &[l / L_SCALE + L_OFFSET, &warp.chroma / AB_SCALE, warp.confidence.shallow_clone()],
            1,
        );
        self.unet.forward(&x) * AB_SCALE
    }

    pub fn warp(&self, l: &Tensor, ref_l: &Tensor, ref_ab: &Tensor) -> Result<WarpTensors, FeatureError> {
        warp_tensors(&self.extractor, l, ref_l, ref_ab, &self.config.warp)
    }
}

/// Standard deviation of the initial U-Net weights; biases start at zero.
pub const INIT_STD: f64 = 0.02;

/// Weights from `N(0, INIT_STD)`, drawn from a ChaCha stream in parameter
/// name order so initialisation never touches the global torch RNG.
fn normal_init(vs: &nn::VarStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| natural_key(&a.0).cmp(&natural_key(&b.0)));
    tch::no_grad(|| {
        for (name, var) in &vars {
            let values: Vec<f32> = if name.ends_with(".bias") {
                vec![0.0; var.numel()]
            } else {
                (0..var.numel()).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            let mut var = var.shallow_clone();
            var.copy_(&Tensor::from_slice(&values).view(var.size().as_slice()));
        }
    });
}

fn check_dim(input: (usize, usize), what: &'static str, other: (usize, usize)) -> Result<(), ColorizeError> {
    if input == other {
        Ok(())
    } else {
        Err(ColorizeError::Shape { input, what, other })
    }
}

/// Lightness of an RGB image; gray inputs land on their exact Lab L.
pub fn lightness_of(img: &RgbImage) -> Array2<f32> {
    rgb_to_lab(img).into_parts().0
}

/// Align `reference` to the lightness `l` (same size).
pub fn warp_reference(
    l: &Array2<f32>,
    reference: &RgbImage,
    model: &ColorizerModel,
) -> Result<WarpedReference, ColorizeError> {
    check_dim(l.dim(), "reference", reference.dim())?;
    let (ref_l, ref_ab) = rgb_to_lab(reference).into_parts();
    let t = model.warp(&plane_to_tensor(l), &plane_to_tensor(&ref_l), &hwc_to_tensor(&ref_ab))?;
    Ok(WarpedReference { warped_chroma: tensor_to_hwc(&t.chroma, 0), confidence: tensor_to_plane(&t.confidence, 0) })
}

/// Pad amounts bringing `n` up to a multiple of [`DOWNSAMPLE_FACTOR`].
pub fn pad_to_multiple(n: usize) -> usize {
    let f = DOWNSAMPLE_FACTOR as usize;
    n.div_ceil(f) * f - n
}

// Reflection needs the pad to be shorter than the side; replicate otherwise.
fn pad_bottom_right(t: &Tensor, ph: i64, pw: i64) -> Tensor {
    if ph == 0 && pw == 0 {
        return t.shallow_clone();
    }
    let s = t.size();
    if ph < s[2] && pw < s[3] {
        t.reflection_pad2d([0, pw, 0, ph])
    } else {
        t.replication_pad2d([0, pw, 0, ph])
    }
}

/// Network chroma for `l`, `(H, W, 2)`. Sides that are not multiples of 16
/// are padded at the bottom and right by reflection, then cropped back.
pub fn predict_chroma(
    l: &Array2<f32>,
    warped: &WarpedReference,
    model: &ColorizerModel,
) -> Result<Array3<f32>, ColorizeError> {
    check_dim(l.dim(), "warped reference", warped.dim())?;
    let (h, w) = l.dim();
    let (ph, pw) = (pad_to_multiple(h) as i64, pad_to_multiple(w) as i64);
    let warp = warped.to_tensors();
    let padded = WarpTensors {
        chroma: pad_bottom_right(&warp.chroma, ph, pw),
        confidence: pad_bottom_right(&warp.confidence, ph, pw),
    };
    let out = tch::no_grad(|| {
        model.forward(&pad_bottom_right(&plane_to_tensor(l), ph, pw), &padded).clamp(AB_MIN as f64, AB_MAX as f64)
    });
    let ab = tensor_to_hwc(&out, 0);
    Ok(ab.slice(s![..h, ..w, ..]).to_owned())
}

#[derive(Clone, Debug)]
pub struct Colorized {
    pub image: RgbConversion,
    pub chroma: Array3<f32>,
    pub warped: WarpedReference,
}

/// Colorize lightness `l` guided by `reference`. A reference of another size
/// is resized bilinearly first.
pub fn colorize(l: &Array2<f32>, reference: &RgbImage, model: &ColorizerModel) -> Result<Colorized, ColorizeError> {
    let (h, w) = l.dim();
    let reference = if reference.dim() == (h, w) {
        reference.clone()
    } else {
        RgbImage::from_clamped(resize_bilinear(reference.pixels(), h, w))?
    };
    let warped = warp_reference(l, &reference, model)?;
    let chroma = predict_chroma(l, &warped, model)?;
    let image = lab_parts_to_rgb(l, &chroma)?;
    Ok(Colorized { image, chroma, warped })
}

/// Mean absolute difference between two chroma fields.
pub fn chroma_mae(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n
}
