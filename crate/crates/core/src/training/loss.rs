//! Layered L1 feature loss over RGB reconstructions.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};
use thiserror::Error;

use crate::features::{FeatureError, Tap, Vgg19};

/// The five stages compared by the loss, in trunk order.
pub const LOSS_TAPS: [Tap; 5] = [Tap::conv(1, 2), Tap::conv(2, 2), Tap::conv(3, 2), Tap::conv(4, 2), Tap::conv(5, 2)];

#[derive(Debug, Error)]
pub enum LossError {
    #[error("prediction {pred:?} and target {target:?} differ in shape")]
    Shape { pred: Vec<i64>, target: Vec<i64> },
    #[error("invalid loss spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualLossSpec {
    pub layers: Vec<Tap>,
    pub weights: Vec<f64>,
    pub extractor: String,
}

impl Default for PerceptualLossSpec {
    fn default() -> Self {
        PerceptualLossSpec { layers: LOSS_TAPS.to_vec(), weights: vec![0.2; 5], extractor: "vgg19".into() }
    }
}

impl PerceptualLossSpec {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.layers != LOSS_TAPS {
            let names: Vec<String> = self.layers.iter().map(Tap::to_string).collect();
            return Err(LossError::Spec(format!("layers must be conv1_2..conv5_2, got {names:?}")));
        }
        if self.weights.len() != self.layers.len() {
            return Err(LossError::Spec(format!("{} weights for {} layers", self.weights.len(), self.layers.len())));
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(LossError::Spec(format!("weight {w} is not positive")));
        }
        if self.extractor != "vgg19" {
            return Err(LossError::Spec(format!("unknown extractor `{}`", self.extractor)));
        }
        Ok(())
    }
}

/// `sum_l w_l * mean |phi_l(pred) - phi_l(target)|` for RGB batches in
/// `[0, 1]`, `(N, 3, H, W)`. Differentiable in `pred`.
pub fn perceptual_loss(vgg: &Vgg19, pred: &Tensor, target: &Tensor, spec: &PerceptualLossSpec) -> Result<Tensor, LossError> {
    spec.validate()?;
    if pred.size() != target.size() {
        return Err(LossError::Shape { pred: pred.size(), target: target.size() });
    }
    let n = pred.size()[0];
    let both = Tensor::cat(&[pred, target], 0);
    let feats = vgg.forward_taps(&both, &spec.layers)?;
    let kind = pred.kind();
    let mut total = Tensor::zeros([], (kind, pred.device()));
    for (f, &w) in feats.iter().zip(&spec.weights) {
        let diff = (f.narrow(0, 0, n) - f.narrow(0, n, n)).abs().mean(kind);
        total = total + diff * w;
    }
    Ok(total)
}

/// Scalar loss value, without gradients.
pub fn perceptual_loss_value(vgg: &Vgg19, pred: &Tensor, target: &Tensor, spec: &PerceptualLossSpec) -> Result<f64, LossError> {
    tch::no_grad(|| perceptual_loss(vgg, pred, target, spec)).map(|t| t.to_kind(Kind::Double).double_value(&[]))
}
