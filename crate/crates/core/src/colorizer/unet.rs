//! Encoder-decoder with skip connections mapping
//! `[L, warped ab, confidence]` to ab. The final linear layer sees the
//! decoder features and the raw input, which instance normalization strips
//! of its absolute scale everywhere else.

use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Tensor};

/// Every spatial side fed to the network must be a multiple of this.
pub const DOWNSAMPLE_FACTOR: i64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_width: i64,
    pub depth: usize,
    pub in_channels: i64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { base_width: 64, depth: 4, in_channels: 4 }
    }
}

impl UNetConfig {
    pub fn desk() -> Self {
        UNetConfig { base_width: 16, ..Self::default() }
    }
}

#[derive(Debug)]
struct DoubleConv {
    c1: nn::Conv2D,
    c2: nn::Conv2D,
}

impl DoubleConv {
    fn new(p: nn::Path, c_in: i64, c_out: i64) -> Self {
        let cfg = nn::ConvConfig { padding: 1, ..Default::default() };
        DoubleConv { c1: nn::conv2d(&p / "c1", c_in, c_out, 3, cfg), c2: nn::conv2d(&p / "c2", c_out, c_out, 3, cfg) }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = instance_norm(&x.apply(&self.c1)).relu();
        instance_norm(&h.apply(&self.c2)).relu()
    }
}

// A 1x1 map has no spatial statistics; it passes through unnormalised.
fn instance_norm(x: &Tensor) -> Tensor {
    let s = x.size();
    if s[2] * s[3] <= 1 {
        return x.shallow_clone();
    }
    x.instance_norm(None::<Tensor>, None::<Tensor>, None::<Tensor>, None::<Tensor>, true, 0.1, 1e-5, false)
}

#[derive(Debug)]
pub struct UNet {
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<nn::ConvTranspose2D>,
    merge: Vec<DoubleConv>,
    head: nn::Conv2D,
}

impl UNet {
    pub fn new(p: &nn::Path, cfg: &UNetConfig) -> Self {
        let width = |level: usize| cfg.base_width << level;
        let mut down = Vec::new();
        let mut c_in = cfg.in_channels;
        for level in 0..cfg.depth {
            down.push(DoubleConv::new(p / format!("down{level}"), c_in, width(level)));
            c_in = width(level);
        }
        let bottom = DoubleConv::new(p / "bottom", c_in, width(cfg.depth));
        let mut up = Vec::new();
        let mut merge = Vec::new();
        let up_cfg = nn::ConvTransposeConfig { stride: 2, ..Default::default() };
        for level in (0..cfg.depth).rev() {
            up.push(nn::conv_transpose2d(p / format!("up{level}"), width(level + 1), width(level), 2, up_cfg));
            merge.push(DoubleConv::new(p / format!("merge{level}"), 2 * width(level), width(level)));
        }
        let head = nn::conv2d(p / "head", width(0) + cfg.in_channels, 2, 1, Default::default());
        UNet { down, bottom, up, merge, head }
    }

    /// Normalised input `(N, C, H, W)` to normalised ab `(N, 2, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x.shallow_clone();
        for block in &self.down {
            let out = block.forward(&h);
            h = out.max_pool2d_default(2);
            skips.push(out);
        }
        h = self.bottom.forward(&h);
        for ((up, merge), skip) in self.up.iter().zip(&self.merge).zip(skips.iter().rev()) {
            h = merge.forward(&Tensor::cat(&[skip.shallow_clone(), h.apply(up)], 1));
        }
        self.head.forward(&Tensor::cat(&[h, x.shallow_clone()], 1))
    }

    /// Zero the output layer, so every prediction is exactly achromatic.
    pub fn zero_output(&mut self) {
        tch::no_grad(|| {
            let _ = self.head.ws.zero_();
            if let Some(b) = self.head.bs.as_mut() {
                let _ = b.zero_();
            }
        });
    }
}
