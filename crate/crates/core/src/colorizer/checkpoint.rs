//! Single-file model archive: a safetensors container whose metadata holds a
//! JSON manifest under the key `manifest`. Parameters are stored as f32 under
//! `extractor.<name>` and `unet.<name>`.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use tch::{nn, Kind, Tensor};
use thiserror::Error;

use super::{ColorizeError, ColorizerModel, ModelConfig, AB_SCALE, L_OFFSET, L_SCALE};

pub const CHECKPOINT_FORMAT: &str = "colorimagine-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 2;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint container: {0}")]
    Container(#[from] safetensors::SafeTensorError),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("normalization constants differ from this build: {0}")]
    Normalization(String),
    #[error("parameter `{0}` missing from checkpoint")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParamShape { name: String, found: Vec<usize>, expected: Vec<i64> },
    #[error(transparent)]
    Model(#[from] ColorizeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub l_scale: f64,
    pub l_offset: f64,
    pub ab_scale: f64,
}

impl Normalization {
    pub fn current() -> Self {
        Normalization { l_scale: L_SCALE, l_offset: L_OFFSET, ab_scale: AB_SCALE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub architecture: ModelConfig,
    pub normalization: Normalization,
    pub training_seed: Option<u64>,
    pub step: u64,
}

impl Manifest {
    pub fn new(architecture: ModelConfig, training_seed: Option<u64>, step: u64) -> Self {
        Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture,
            normalization: Normalization::current(),
            training_seed,
            step,
        }
    }
}

fn collect(prefix: &str, vs: &nn::VarStore, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>) {
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, t) in vars {
        let t = t.detach().to_kind(Kind::Float).contiguous();
        let shape = t.size().iter().map(|&d| d as usize).collect();
        let values = Vec::<f32>::try_from(t.view([-1])).expect("float parameter");
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.push((format!("{prefix}.{name}"), shape, bytes));
    }
}

/// Serialize `model` with its manifest.
pub fn encode_checkpoint(model: &ColorizerModel, training_seed: Option<u64>, step: u64) -> Result<Vec<u8>, CheckpointError> {
    let manifest = Manifest::new(model.config().clone(), training_seed, step);
    let mut blobs = Vec::new();
    collect("extractor", model.extractor().var_store(), &mut blobs);
    collect("unet", model.unet_var_store(), &mut blobs);
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| Ok((name.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()?;
    let json = serde_json::to_string(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), json)]);
    Ok(safetensors::serialize(views, &Some(meta))?)
}

pub fn save_checkpoint(
    model: &ColorizerModel,
    path: impl AsRef<Path>,
    training_seed: Option<u64>,
    step: u64,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(model, training_seed, step)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_manifest(bytes: &[u8]) -> Result<Manifest, CheckpointError> {
    let (_, meta) = SafeTensors::read_metadata(bytes)?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| CheckpointError::Manifest("no manifest entry".into()))?;
    let manifest: Manifest = serde_json::from_str(json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Manifest(format!("format `{}`", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: manifest.version, expected: CHECKPOINT_VERSION });
    }
    if manifest.normalization != Normalization::current() {
        return Err(CheckpointError::Normalization(format!("{:?}", manifest.normalization)));
    }
    Ok(manifest)
}

fn restore(prefix: &str, vs: &nn::VarStore, file: &SafeTensors) -> Result<(), CheckpointError> {
    for (name, var) in vs.variables() {
        let key = format!("{prefix}.{name}");
        let view = file.tensor(&key).map_err(|_| CheckpointError::Missing(key.clone()))?;
        let expected = var.size();
        if view.dtype() != Dtype::F32 || view.shape().iter().map(|&d| d as i64).ne(expected.iter().copied()) {
            return Err(CheckpointError::ParamShape { name: key, found: view.shape().to_vec(), expected });
        }
        let values: Vec<f32> =
            view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut var = var;
        tch::no_grad(|| var.copy_(&Tensor::from_slice(&values).view(expected.as_slice())));
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ColorizerModel, Manifest), CheckpointError> {
    let manifest = read_manifest(bytes)?;
    let mut config = manifest.architecture.clone();
    // Extractor weights come from the archive, never from an external file.
    config.extractor.weights = None;
    let model = ColorizerModel::new(&config)?;
    let file = SafeTensors::deserialize(bytes)?;
    restore("extractor", model.extractor().var_store(), &file)?;
    restore("unet", model.unet_var_store(), &file)?;
    Ok((model, manifest))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ColorizerModel, Manifest), CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ExtractorConfig;
    use crate::colorizer::UNetConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig { width_divisor: 16, ..Default::default() },
            unet: UNetConfig { base_width: 4, ..Default::default() },
            init_seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let model = ColorizerModel::new(&small()).unwrap();
        let bytes = encode_checkpoint(&model, Some(9), 12).unwrap();
        let (back, manifest) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(manifest.training_seed, Some(9));
        assert_eq!(manifest.step, 12);
        assert_eq!(back.config(), model.config());
        let a = model.unet_var_store().variables();
        for (name, t) in back.unet_var_store().variables() {
            assert!(t.equal(&a[&name]), "{name}");
        }
    }

    #[test]
    fn other_versions_are_refused() {
        let model = ColorizerModel::new(&small()).unwrap();
        let mut manifest = Manifest::new(model.config().clone(), None, 0);
        manifest.version = CHECKPOINT_VERSION + 1;
        let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest).unwrap())]);
        let bytes = safetensors::serialize(Vec::<(String, TensorView)>::new(), &Some(meta)).unwrap();
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Version { found, .. }) if found == CHECKPOINT_VERSION + 1));
    }

    #[test]
    fn missing_manifest_is_refused() {
        let bytes = safetensors::serialize(Vec::<(String, TensorView)>::new(), &None).unwrap();
        assert!(matches!(read_manifest(&bytes), Err(CheckpointError::Manifest(_))));
    }
}
