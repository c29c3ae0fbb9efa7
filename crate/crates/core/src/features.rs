//! VGG-19 convolutional trunk used both as the correspondence feature space of
//! the warp and as the perceptual-loss feature space.
//!
//! Weights come from one of two places: a torchvision-style safetensors file
//! (`features.N.weight`, `features.N.bias`) or a seeded He-normal
//! initialisation. `width_divisor` narrows every stage; only divisor 1 can
//! load published weights.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tch::{nn, Device, Kind, Tensor};
use thiserror::Error;

/// Output channels of each convolution, grouped by pooling stage.
pub const VGG19_STAGES: [&[i64]; 5] =
    [&[64, 64], &[128, 128], &[256, 256, 256, 256], &[512, 512, 512, 512], &[512, 512, 512, 512]];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown feature tap `{0}`")]
    UnknownTap(String),
    #[error("pretrained weights need width_divisor 1, got {0}")]
    NarrowPretrained(i64),
    #[error("width_divisor must be positive, got {0}")]
    BadDivisor(i64),
    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

/// A named point in the trunk: `conv{stage}_{index}` is the convolution
/// output, `relu{stage}_{index}` the activation after it. Both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tap {
    pub stage: usize,
    pub index: usize,
    pub relu: bool,
}

impl Tap {
    pub const fn conv(stage: usize, index: usize) -> Self {
        Tap { stage, index, relu: false }
    }

    pub const fn relu(stage: usize, index: usize) -> Self {
        Tap { stage, index, relu: true }
    }

    fn valid(&self) -> bool {
        (1..=5).contains(&self.stage) && (1..=VGG19_STAGES[self.stage - 1].len()).contains(&self.index)
    }

    /// Position in execution order; the relu of a conv follows it.
    fn order(&self) -> (usize, usize, bool) {
        (self.stage, self.index, self.relu)
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.relu { "relu" } else { "conv" };
        write!(f, "{kind}{}_{}", self.stage, self.index)
    }
}

impl FromStr for Tap {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FeatureError::UnknownTap(s.to_string());
        let (relu, rest) = if let Some(r) = s.strip_prefix("relu") {
            (true, r)
        } else if let Some(r) = s.strip_prefix("conv") {
            (false, r)
        } else {
            return Err(bad());
        };
        let (a, b) = rest.split_once('_').ok_or_else(bad)?;
        let tap = Tap { stage: a.parse().map_err(|_| bad())?, index: b.parse().map_err(|_| bad())?, relu };
        if tap.valid() {
            Ok(tap)
        } else {
            Err(bad())
        }
    }
}

impl Serialize for Tap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub width_divisor: i64,
    /// Seed of the He-normal initialisation used when `weights` is absent.
    pub init_seed: u64,
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { width_divisor: 1, init_seed: 0, weights: None }
    }
}

impl ExtractorConfig {
    /// Narrow trunk that keeps single-core training runs in minutes.
    pub fn desk() -> Self {
        ExtractorConfig { width_divisor: 4, ..Self::default() }
    }

    pub fn channels(&self, stage: usize, index: usize) -> i64 {
        (VGG19_STAGES[stage - 1][index - 1] / self.width_divisor).max(1)
    }
}

/// Frozen VGG-19 trunk. Inputs are sRGB in `[0, 1]`, `(N, 3, H, W)`.
pub struct Vgg19 {
    vs: nn::VarStore,
    convs: Vec<Vec<nn::Conv2D>>,
    config: ExtractorConfig,
}

impl fmt::Debug for Vgg19 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vgg19").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Vgg19 {
    pub fn new(config: &ExtractorConfig) -> Result<Self, FeatureError> {
        if config.width_divisor < 1 {
            return Err(FeatureError::BadDivisor(config.width_divisor));
        }
        if config.weights.is_some() && config.width_divisor != 1 {
            return Err(FeatureError::NarrowPretrained(config.width_divisor));
        }
        let mut vs = nn::VarStore::new(Device::Cpu);
        let features = vs.root() / "features";
        let conv_cfg = nn::ConvConfig { padding: 1, ..Default::default() };
        let mut convs = Vec::new();
        // torchvision numbering: every conv and relu takes one slot, every
        // pool one more.
        let mut slot = 0usize;
        let mut c_in = 3;
        for (s, stage) in VGG19_STAGES.iter().enumerate() {
            let mut group = Vec::new();
            for i in 0..stage.len() {
                let c_out = config.channels(s + 1, i + 1);
                group.push(nn::conv2d(&features / slot, c_in, c_out, 3, conv_cfg));
                slot += 2;
                c_in = c_out;
            }
            slot += 1;
            convs.push(group);
        }
        match &config.weights {
            Some(path) => vs.load_partial(path).map(|_| ())?,
            None => he_init(&vs, config.init_seed),
        }
        vs.freeze();
        Ok(Vgg19 { vs, convs, config: config.clone() })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn kind(&self) -> Kind {
        self.convs[0][0].ws.kind()
    }

    /// Convert all weights, e.g. to `Kind::Double` for gradient checks.
    pub fn set_kind(&mut self, kind: Kind) {
        self.vs.set_kind(kind);
    }

    pub fn tap_channels(&self, tap: Tap) -> i64 {
        self.config.channels(tap.stage, tap.index)
    }

    /// Activations at the requested taps, in the order given. The trunk is
    /// evaluated only as deep as the deepest tap.
    pub fn forward_taps(&self, rgb: &Tensor, taps: &[Tap]) -> Result<Vec<Tensor>, FeatureError> {
        if let Some(bad) = taps.iter().find(|t| !t.valid()) {
            return Err(FeatureError::UnknownTap(bad.to_string()));
        }
        let deepest = match taps.iter().map(Tap::order).max() {
            Some(d) => d,
            None => return Ok(Vec::new()),
        };
        let mut found: Vec<Option<Tensor>> = taps.iter().map(|_| None).collect();
        let mut x = normalize(rgb);
        'outer: for (s, group) in self.convs.iter().enumerate() {
            if s > 0 {
                x = x.max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], true);
            }
            for (i, conv) in group.iter().enumerate() {
                let pre = x.apply(conv);
                let post = pre.relu();
                for (slot, tap) in taps.iter().enumerate() {
                    if tap.stage == s + 1 && tap.index == i + 1 {
                        found[slot] = Some(if tap.relu { post.shallow_clone() } else { pre.shallow_clone() });
                    }
                }
                x = post;
                if (s + 1, i + 1) >= (deepest.0, deepest.1) {
                    break 'outer;
                }
            }
        }
        Ok(found.into_iter().map(|t| t.expect("every tap visited")).collect())
    }
}

fn normalize(rgb: &Tensor) -> Tensor {
    let opts = (rgb.kind(), rgb.device());
    let mean = Tensor::from_slice(&IMAGENET_MEAN).to_kind(opts.0).view([1, 3, 1, 1]);
    let std = Tensor::from_slice(&IMAGENET_STD).to_kind(opts.0).view([1, 3, 1, 1]);
    (rgb - mean) / std
}

/// He-normal weights from a ChaCha stream, zero biases. Variables are visited
/// in name order so the result depends only on the seed and the shapes.
fn he_init(vs: &nn::VarStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| natural_key(&a.0).cmp(&natural_key(&b.0)));
    tch::no_grad(|| {
        for (name, mut var) in vars {
            if name.ends_with(".bias") {
                let _ = var.zero_();
                continue;
            }
            let size = var.size();
            let fan_in: i64 = size[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let values: Vec<f32> = (0..var.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
            var.copy_(&Tensor::from_slice(&values).view(size.as_slice()));
        }
    });
}

pub(crate) fn natural_key(name: &str) -> Vec<(u64, String)> {
    name.split('.').map(|p| (p.parse().unwrap_or(u64::MAX), p.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExtractorConfig {
        ExtractorConfig { width_divisor: 16, ..Default::default() }
    }

    #[test]
    fn tap_names_parse_and_print() {
        for name in ["conv1_2", "relu2_2", "relu3_2", "conv5_4"] {
            assert_eq!(name.parse::<Tap>().unwrap().to_string(), name);
        }
        for bad in ["conv6_1", "relu1_3", "pool1", "conv1-2"] {
            assert!(bad.parse::<Tap>().is_err(), "{bad}");
        }
    }

    #[test]
    fn torchvision_parameter_names() {
        let vgg = Vgg19::new(&tiny()).unwrap();
        let vars = vgg.var_store().variables();
        assert_eq!(vars.len(), 32);
        for slot in [0, 2, 5, 7, 10, 16, 19, 28, 34] {
            assert!(vars.contains_key(&format!("features.{slot}.weight")), "{slot}");
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Vgg19::new(&tiny()).unwrap();
        let b = Vgg19::new(&tiny()).unwrap();
        let c = Vgg19::new(&ExtractorConfig { init_seed: 1, ..tiny() }).unwrap();
        let w = |v: &Vgg19| v.var_store().variables()["features.7.weight"].shallow_clone();
        assert!(w(&a).equal(&w(&b)));
        assert!(!w(&a).equal(&w(&c)));
    }

    #[test]
    fn tap_shapes_survive_tiny_inputs() {
        let vgg = Vgg19::new(&tiny()).unwrap();
        let x = Tensor::rand([1, 3, 8, 8], (Kind::Float, Device::Cpu));
        let taps = ["conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"].map(|t| t.parse().unwrap());
        let out = vgg.forward_taps(&x, &taps).unwrap();
        let sides: Vec<i64> = out.iter().map(|t| t.size()[2]).collect();
        assert_eq!(sides, vec![8, 4, 2, 1, 1]);
        assert_eq!(out[2].size()[1], 256 / 16);
    }

    #[test]
    fn relu_taps_are_non_negative_and_conv_taps_are_not() {
        let vgg = Vgg19::new(&tiny()).unwrap();
        let x = Tensor::rand([1, 3, 16, 16], (Kind::Float, Device::Cpu));
        let out = vgg.forward_taps(&x, &[Tap::conv(2, 2), Tap::relu(2, 2)]).unwrap();
        assert!(out[0].min().double_value(&[]) < 0.0);
        assert!(out[1].min().double_value(&[]) >= 0.0);
        assert!(out[1].equal(&out[0].relu()));
    }

    #[test]
    fn narrow_trunk_refuses_pretrained_weights() {
        let cfg = ExtractorConfig { width_divisor: 4, weights: Some("w.safetensors".into()), ..Default::default() };
        assert!(matches!(Vgg19::new(&cfg), Err(FeatureError::NarrowPretrained(4))));
    }
}
