//! Reference synthesis: segment the grayscale input, then sample colored
//! candidate references from a generator conditioned on the segmentation.
//!
//! Both stages are pluggable. A backend is either an in-process adapter
//! implementing [`Segmenter`] / [`Generator`], an external command speaking
//! the contract in [`adapters`], or a directory of pre-generated results.

pub mod adapters;
pub mod segmentation;
pub mod toy;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::{LabImage, RgbImage};
pub use adapters::{CommandBackend, DirectoryBackend, SubprocessMode};
pub use segmentation::{BBox, SegmentationMap, FALLBACK_SEGMENT, UNLABELED_CLASS};
pub use toy::{toy_generate, toy_subprocess_response, ToyGenerator, ToySegmenter};

/// Number of references sampled when the caller does not say.
pub const DEFAULT_REFERENCE_COUNT: usize = 6;

#[derive(Debug, Error)]
pub enum ImaginationError {
    #[error("backend {backend} failed: {message}")]
    Backend { backend: String, message: String, diagnostics: String },
    #[error("degenerate segmentation: {0}")]
    DegenerateSegmentation(String),
    #[error("expected {expected} seeds, got {actual}")]
    SeedCount { expected: usize, actual: usize },
    #[error("at least one reference must be requested")]
    NoSamples,
    #[error("all {} reference samples failed", .0.len())]
    AllSamplesFailed(Vec<SampleFailure>),
    #[error("a {kind:?} backend named {name:?} is already registered")]
    DuplicateBackend { kind: BackendKind, name: String },
    #[error("no {kind:?} backend named {name:?}")]
    UnknownBackend { kind: BackendKind, name: String },
    #[error("reference {index} is {actual:?}, segmentation is {expected:?}")]
    ReferenceShape { index: usize, expected: (usize, usize), actual: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendFailure {
    pub message: String,
    pub diagnostics: String,
}

impl BackendFailure {
    pub fn new(message: impl Into<String>) -> Self {
        Self { message: message.into(), diagnostics: String::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Segmenter,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Contract {
    InProcess,
    Subprocess { program: PathBuf, args: Vec<String> },
    Directory { root: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub name: String,
    pub contract: Contract,
}

/// Context extraction: lightness (`L` in `[0, 100]`) to a per-pixel class map.
pub trait Segmenter: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;
    fn segment(&self, lightness: &Array2<f32>) -> Result<Array2<u32>, BackendFailure>;

    fn class_name(&self, class: u32) -> String {
        if class == UNLABELED_CLASS {
            "unlabeled".to_string()
        } else {
            format!("class {class}")
        }
    }

    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Conditional synthesis: segmentation plus latent code to a color image.
pub trait Generator: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;
    fn generate(&self, seg: &SegmentationMap, z: &LatentCode) -> Result<RgbImage, BackendFailure>;

    /// Whether `generate` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Latent code for one reference. The optional vector is a pure function of
/// the seed, for generators that consume a dense code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
}

impl LatentCode {
    pub fn from_seed(seed: u64) -> Self {
        Self { seed, vector: None }
    }

    /// Seed plus a standard-normal vector of length `dim`.
    pub fn with_dim(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vector = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { seed, vector: Some(vector) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub seed: u64,
    pub message: String,
    pub diagnostics: String,
}

/// Candidate references sampled for one segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub references: Vec<RgbImage>,
    pub latents: Vec<LatentCode>,
    pub segmentation: SegmentationMap,
    /// Samples the generator could not produce; they are not in `references`.
    pub failures: Vec<SampleFailure>,
}

impl ReferenceSet {
    pub fn new(
        references: Vec<RgbImage>,
        latents: Vec<LatentCode>,
        segmentation: SegmentationMap,
    ) -> Result<Self, ImaginationError> {
        if references.is_empty() {
            return Err(ImaginationError::NoSamples);
        }
        if latents.len() != references.len() {
            return Err(ImaginationError::SeedCount { expected: references.len(), actual: latents.len() });
        }
        let expected = segmentation.dim();
        for (index, r) in references.iter().enumerate() {
            if r.dim() != expected {
                return Err(ImaginationError::ReferenceShape { index, expected, actual: r.dim() });
            }
        }
        Ok(Self { references, latents, segmentation, failures: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    /// A copy with one more candidate appended.
    pub fn with_candidate(&self, reference: RgbImage, latent: LatentCode) -> Result<Self, ImaginationError> {
        let mut references = self.references.clone();
        let mut latents = self.latents.clone();
        references.push(reference);
        latents.push(latent);
        Self::new(references, latents, self.segmentation.clone())
    }
}

/// Backends addressable by name, unique per kind.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    segmenters: BTreeMap<String, Arc<dyn Segmenter>>,
    generators: BTreeMap<String, Arc<dyn Generator>>,
}

impl BackendRegistry {
    /// Registry holding the toy segmenter and generator under the name `toy`.
    pub fn with_toy() -> Self {
        let mut reg = Self::default();
        reg.register_segmenter(Arc::new(ToySegmenter::default())).expect("empty registry");
        reg.register_generator(Arc::new(ToyGenerator::default())).expect("empty registry");
        reg
    }

    pub fn register_segmenter(&mut self, backend: Arc<dyn Segmenter>) -> Result<(), ImaginationError> {
        let name = backend.descriptor().name;
        if self.segmenters.contains_key(&name) {
            return Err(ImaginationError::DuplicateBackend { kind: BackendKind::Segmenter, name });
        }
        self.segmenters.insert(name, backend);
        Ok(())
    }

    pub fn register_generator(&mut self, backend: Arc<dyn Generator>) -> Result<(), ImaginationError> {
        let name = backend.descriptor().name;
        if self.generators.contains_key(&name) {
            return Err(ImaginationError::DuplicateBackend { kind: BackendKind::Generator, name });
        }
        self.generators.insert(name, backend);
        Ok(())
    }

    pub fn segmenter(&self, name: &str) -> Result<Arc<dyn Segmenter>, ImaginationError> {
        self.segmenters.get(name).cloned().ok_or_else(|| ImaginationError::UnknownBackend {
            kind: BackendKind::Segmenter,
            name: name.to_string(),
        })
    }

    pub fn generator(&self, name: &str) -> Result<Arc<dyn Generator>, ImaginationError> {
        self.generators.get(name).cloned().ok_or_else(|| ImaginationError::UnknownBackend {
            kind: BackendKind::Generator,
            name: name.to_string(),
        })
    }

    pub fn descriptors(&self) -> Vec<BackendDescriptor> {
        self.segmenters
            .values()
            .map(|b| b.descriptor())
            .chain(self.generators.values().map(|b| b.descriptor()))
            .collect()
    }
}

/// Run the segmenter on the lightness of `gray`. Chroma, if any, is ignored.
pub fn extract_context(gray: &LabImage, backend: &dyn Segmenter) -> Result<SegmentationMap, ImaginationError> {
    let lightness = gray.lightness();
    let classes = backend.segment(lightness).map_err(|f| ImaginationError::Backend {
        backend: backend.descriptor().name,
        message: f.message,
        diagnostics: f.diagnostics,
    })?;
    if classes.is_empty() {
        return Err(ImaginationError::DegenerateSegmentation("segmenter returned no pixels".into()));
    }
    if classes.dim() != lightness.dim() {
        return Err(ImaginationError::DegenerateSegmentation(format!(
            "segmenter returned {:?} for a {:?} image",
            classes.dim(),
            lightness.dim()
        )));
    }
    SegmentationMap::from_class_map(&classes)
}

/// Sample `n` references, the `i`-th from `seeds[i]`. Failed samples are
/// recorded and skipped; it is an error only if every sample fails.
pub fn sample_references(
    seg: &SegmentationMap,
    n: usize,
    seeds: &[u64],
    backend: &dyn Generator,
) -> Result<ReferenceSet, ImaginationError> {
    if n == 0 {
        return Err(ImaginationError::NoSamples);
    }
    if seeds.len() != n {
        return Err(ImaginationError::SeedCount { expected: n, actual: seeds.len() });
    }
    let expected = seg.dim();
    let run = |(index, &seed): (usize, &u64)| {
        let z = LatentCode::from_seed(seed);
        let outcome = match backend.generate(seg, &z) {
            Ok(img) if img.dim() == expected => Ok(img),
            Ok(img) => Err(BackendFailure::new(format!(
                "generated {:?}, expected {:?}",
                img.dim(),
                expected
            ))),
            Err(f) => Err(f),
        };
        (index, z, outcome)
    };
    let results: Vec<_> = if backend.concurrent_safe() {
        seeds.par_iter().enumerate().map(run).collect()
    } else {
        seeds.iter().enumerate().map(run).collect()
    };

    let mut references = Vec::new();
    let mut latents = Vec::new();
    let mut failures = Vec::new();
    for (index, z, outcome) in results {
        match outcome {
            Ok(img) => {
                references.push(img);
                latents.push(z);
            }
            Err(f) => {
                log::warn!("reference sample {index} (seed {}) failed: {}", z.seed, f.message);
                failures.push(SampleFailure { index, seed: z.seed, message: f.message, diagnostics: f.diagnostics });
            }
        }
    }
    if references.is_empty() {
        return Err(ImaginationError::AllSamplesFailed(failures));
    }
    let mut set = ReferenceSet::new(references, latents, seg.clone())?;
    set.failures = failures;
    Ok(set)
}

/// `n` consecutive seeds starting at `base`.
pub fn consecutive_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}
