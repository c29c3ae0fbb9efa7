//! Training the colorizer on simulated references.
//!
//! Each step draws `batch_size` (target, donor) pairs and random crops, builds
//! the simulated reference for each, warps it onto the target lightness,
//! predicts chroma and minimises the perceptual loss between the two RGB
//! reconstructions. Only the U-Net is optimised.
//!
//! The loss at step 1 is a function of the config, the corpus and the seed.
//! Later steps are not promised to be bitwise reproducible across machines.

pub mod config;
pub mod eval;
pub mod loss;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Kind, Tensor};
use thiserror::Error;

use crate::colorizer::{save_checkpoint, CheckpointError, ColorizeError, ColorizerModel, DOWNSAMPLE_FACTOR};
use crate::colorspace::{rgb_to_lab, RgbImage};
use crate::features::FeatureError;
use crate::simulation::{simulate_sample, SimulationError};
use crate::tensors::{hwc_to_tensor, lab_to_rgb_tensor, plane_to_tensor};

pub use config::TrainConfig;
pub use eval::{evaluate_checkpoint, EvalEntry, EvalReport};
pub use loss::{perceptual_loss, perceptual_loss_value, LossError, PerceptualLossSpec, LOSS_TAPS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("training needs at least 2 images, got {0}")]
    CorpusTooSmall(usize),
    #[error("image {index} is {dim:?}, smaller than one {min}x{min} tile")]
    ImageTooSmall { index: usize, dim: (usize, usize), min: usize },
    #[error("non-finite loss {loss} at step {step}; diagnostic checkpoint: {checkpoint:?}")]
    NonFinite { step: usize, loss: f64, checkpoint: Option<PathBuf> },
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ColorizeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Milliseconds since training started.
    pub wall_ms: u64,
}

pub struct TrainOutcome {
    pub model: ColorizerModel,
    pub log: Vec<LogEntry>,
    pub checkpoints: Vec<PathBuf>,
}

/// Batched step inputs: lightness `(B,1,S,S)`, true chroma `(B,2,S,S)`, and
/// the simulated reference in Lab.
pub struct StepBatch {
    pub l: Tensor,
    pub ab: Tensor,
    pub ref_l: Tensor,
    pub ref_ab: Tensor,
}

/// Largest multiple of 16 not above `crop` that fits every image.
pub fn effective_crop(corpus: &[RgbImage], crop: usize) -> Result<usize, TrainError> {
    let f = DOWNSAMPLE_FACTOR as usize;
    let mut side = crop;
    for (index, img) in corpus.iter().enumerate() {
        let (h, w) = img.dim();
        if h.min(w) < f {
            return Err(TrainError::ImageTooSmall { index, dim: (h, w), min: f });
        }
        side = side.min(h.min(w));
    }
    Ok(side / f * f)
}

/// Draw one batch from `rng`: target, donor, crop corners and mask seed per
/// element, in that order.
pub fn draw_batch(
    corpus: &[RgbImage],
    cfg: &TrainConfig,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepBatch, TrainError> {
    let mut ls = Vec::new();
    let mut abs = Vec::new();
    let mut rls = Vec::new();
    let mut rabs = Vec::new();
    let corner = |img: &RgbImage, rng: &mut ChaCha8Rng| {
        let (h, w) = img.dim();
        (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side))
    };
    for _ in 0..cfg.batch_size {
        let target = rng.gen_range(0..corpus.len());
        let mut donor = rng.gen_range(0..corpus.len() - 1);
        if donor >= target {
            donor += 1;
        }
        let (ty, tx) = corner(&corpus[target], rng);
        let (dy, dx) = corner(&corpus[donor], rng);
        let mask_seed: u64 = rng.gen();
        let t = corpus[target].crop(ty, tx, side, side);
        let d = corpus[donor].crop(dy, dx, side, side);
        let sample = simulate_sample(&t, &d, donor, mask_seed, &cfg.mask)?;
        let (rl, rab) = rgb_to_lab(&sample.r_prime).into_parts();
        ls.push(plane_to_tensor(&sample.x));
        abs.push(hwc_to_tensor(&sample.y));
        rls.push(plane_to_tensor(&rl));
        rabs.push(hwc_to_tensor(&rab));
    }
    Ok(StepBatch {
        l: Tensor::cat(&ls, 0),
        ab: Tensor::cat(&abs, 0),
        ref_l: Tensor::cat(&rls, 0),
        ref_ab: Tensor::cat(&rabs, 0),
    })
}

/// Loss of `model` on `batch`, with the graph attached for backprop.
pub fn batch_loss(model: &ColorizerModel, batch: &StepBatch, spec: &PerceptualLossSpec) -> Result<Tensor, TrainError> {
    let warp = model.warp(&batch.l, &batch.ref_l, &batch.ref_ab)?;
    let pred_ab = model.forward(&batch.l, &warp);
    let pred = lab_to_rgb_tensor(&batch.l, &pred_ab);
    let truth = lab_to_rgb_tensor(&batch.l, &batch.ab);
    Ok(perceptual_loss(model.extractor(), &pred, &truth, spec)?)
}

/// Train a freshly initialised model.
pub fn train(corpus: &[RgbImage], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let model = ColorizerModel::new(&cfg.model)?;
    train_model(model, corpus, cfg, |_| {})
}

/// Continue training `model`; `on_step` sees every log entry as it is made.
pub fn train_model(
    model: ColorizerModel,
    corpus: &[RgbImage],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(TrainError::CorpusTooSmall(corpus.len()));
    }
    let side = effective_crop(corpus, cfg.crop_size)?;
    if side != cfg.crop_size {
        log::warn!("crop size reduced from {} to {side} to fit the corpus", cfg.crop_size);
    }
    let mut log_file = match &cfg.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut outcome = TrainOutcome { model, log: Vec::new(), checkpoints: Vec::new() };
    if cfg.iterations == 0 {
        return Ok(outcome);
    }

    let mut opt = nn::Adam::default().build(outcome.model.unet_var_store(), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    for step in 1..=cfg.iterations {
        let batch = draw_batch(corpus, cfg, side, &mut rng)?;
        let loss = batch_loss(&outcome.model, &batch, &cfg.loss)?;
        let value = loss.to_kind(Kind::Double).double_value(&[]);
        if !value.is_finite() {
            let checkpoint = cfg.output_dir.as_ref().map(|d| d.join("diagnostic.safetensors"));
            if let Some(path) = &checkpoint {
                save_checkpoint(&outcome.model, path, Some(cfg.seed), step as u64)?;
            }
            return Err(TrainError::NonFinite { step, loss: value, checkpoint });
        }
        opt.backward_step(&loss);
        let entry = LogEntry { step, loss: value, lr: cfg.learning_rate, wall_ms: start.elapsed().as_millis() as u64 };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry).expect("plain data"))?;
        }
        on_step(&entry);
        outcome.log.push(entry);
        if let Some(dir) = &cfg.output_dir {
            if step % cfg.checkpoint_every == 0 || step == cfg.iterations {
                let name = if step == cfg.iterations { "model.safetensors".to_string() } else { format!("checkpoint_{step:06}.safetensors") };
                let path = dir.join(name);
                save_checkpoint(&outcome.model, &path, Some(cfg.seed), step as u64)?;
                outcome.checkpoints.push(path);
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    Ok(outcome)
}

/// Mean of the last `window` logged losses.
pub fn smoothed_final_loss(log: &[LogEntry], window: usize) -> Option<f64> {
    let tail = &log[log.len().saturating_sub(window.max(1))..];
    (!tail.is_empty()).then(|| tail.iter().map(|e| e.loss).sum::<f64>() / tail.len() as f64)
}

/// Peak signal-to-noise ratio in dB of two `[0, 1]` images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let n = a.pixels().len() as f64;
    let mse = a.pixels().iter().zip(b.pixels().iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
