//! Dense feature correspondence between the input lightness and the
//! reference, and softmax aggregation of reference chroma along it.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::features::{FeatureError, Tap, Vgg19};
use crate::tensors::gray_rgb_tensor;

pub const WARP_TAPS: [Tap; 2] = [Tap::relu(2, 2), Tap::relu(3, 2)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpConfig {
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
    /// Correspondence grid cap; larger feature grids are average-pooled
    /// down to fit, bounding the `P x P` attention matrix.
    pub max_positions: i64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig { temperature: 0.01, max_positions: 4096 }
    }
}

impl WarpConfig {
    /// Grid used for an `h x w` input: quarter resolution, shrunk to the cap.
    pub fn grid(&self, h: i64, w: i64) -> (i64, i64) {
        let (gh, gw) = ((h + 3) / 4, (w + 3) / 4);
        if gh * gw <= self.max_positions {
            return (gh, gw);
        }
        let s = (self.max_positions as f64 / (gh * gw) as f64).sqrt();
        (((gh as f64 * s).floor() as i64).max(1), ((gw as f64 * s).floor() as i64).max(1))
    }
}

/// Tensor form of a warp: chroma `(N, 2, H, W)` in ab units, confidence
/// `(N, 1, H, W)` in `[0, 1]`.
pub struct WarpTensors {
    pub chroma: Tensor,
    pub confidence: Tensor,
}

fn correspondence_features(vgg: &Vgg19, rgb: &Tensor, grid: (i64, i64)) -> Result<Tensor, FeatureError> {
    let taps = vgg.forward_taps(rgb, &WARP_TAPS)?;
    let shallow = taps[0].adaptive_avg_pool2d([grid.0, grid.1]);
    let deep = taps[1].adaptive_avg_pool2d([grid.0, grid.1]);
    let f = Tensor::cat(&[shallow, deep], 1).flatten(2, 3);
    let f = &f - f.mean_dim(2, true, f.kind());
    let norm = f.square().sum_dim_intlist(1, true, f.kind()).sqrt().clamp_min(1e-8);
    Ok(f / norm)
}

/// `l` is the input lightness `(N, 1, H, W)`; `ref_l` and `ref_ab` are the
/// reference in Lab at the same size. Gradients are not tracked.
pub fn warp_tensors(
    vgg: &Vgg19,
    l: &Tensor,
    ref_l: &Tensor,
    ref_ab: &Tensor,
    cfg: &WarpConfig,
) -> Result<WarpTensors, FeatureError> {
    tch::no_grad(|| {
        let size = l.size();
        let (h, w) = (size[2], size[3]);
        let grid = cfg.grid(h, w);
        let kind = vgg.kind();
        let fx = correspondence_features(vgg, &gray_rgb_tensor(l).to_kind(kind), grid)?;
        let fr = correspondence_features(vgg, &gray_rgb_tensor(ref_l).to_kind(kind), grid)?;
        // (N, P_x, P_r): row p holds the match distribution of input position p.
        let weights = (fx.transpose(1, 2).bmm(&fr) / cfg.temperature).softmax(2, kind);
        let ab = ref_ab.to_kind(kind).adaptive_avg_pool2d([grid.0, grid.1]).flatten(2, 3);
        let warped = ab.bmm(&weights.transpose(1, 2)).view([-1, 2, grid.0, grid.1]);
        let confidence = weights.amax(2, true).view([-1, 1, grid.0, grid.1]);
        let up = |t: Tensor| t.upsample_bilinear2d([h, w], false, None, None).to_kind(Kind::Float);
        Ok(WarpTensors { chroma: up(warped), confidence: up(confidence).clamp(0.0, 1.0) })
    })
}

/// Same as [`warp_tensors`] but also returns the correspondence matrix
/// `(N, P_x, P_r)`, for inspection.
pub fn correspondence(vgg: &Vgg19, l: &Tensor, ref_l: &Tensor, cfg: &WarpConfig) -> Result<Tensor, FeatureError> {
    tch::no_grad(|| {
        let size = l.size();
        let grid = cfg.grid(size[2], size[3]);
        let kind = vgg.kind();
        let fx = correspondence_features(vgg, &gray_rgb_tensor(l).to_kind(kind), grid)?;
        let fr = correspondence_features(vgg, &gray_rgb_tensor(ref_l).to_kind(kind), grid)?;
        Ok((fx.transpose(1, 2).bmm(&fr) / cfg.temperature).softmax(2, kind))
    })
}
