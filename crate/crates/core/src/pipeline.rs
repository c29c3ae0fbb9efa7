//! End-to-end flow: segment, imagine references, compose per segment,
//! colorize. Every intermediate is returned for inspection.

use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorizer::{colorize, lightness_of, ColorizerModel, WarpedReference};
use crate::colorspace::{LabImage, RgbImage};
use crate::composition::{assemble_reference, assign_segments, ComposedReference, CompositionAssignment};
use crate::imagination::{
    consecutive_seeds, extract_context, sample_references, BackendRegistry, ReferenceSet, SegmentationMap,
    DEFAULT_REFERENCE_COUNT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Context,
    Generation,
    Composition,
    Colorization,
    Session,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Input => "input",
            Stage::Context => "context",
            Stage::Generation => "generation",
            Stage::Composition => "composition",
            Stage::Colorization => "colorization",
            Stage::Session => "session",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, err: impl fmt::Display) -> Self {
        PipelineError { stage, message: err.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub n: usize,
    /// One seed per reference; `None` means `0, 1, ..., n - 1`.
    pub seeds: Option<Vec<u64>>,
    pub segmenter: String,
    pub generator: String,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams { n: DEFAULT_REFERENCE_COUNT, seeds: None, segmenter: "toy".into(), generator: "toy".into() }
    }
}

impl PipelineParams {
    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| consecutive_seeds(0, self.n))
    }
}

/// Segmentation and sampled candidates for one input.
#[derive(Clone, Debug)]
pub struct Imagination {
    pub segmentation: SegmentationMap,
    pub references: ReferenceSet,
}

#[derive(Clone, Debug)]
pub struct Rendering {
    pub composed: ComposedReference,
    pub result: RgbImage,
    pub clipped_pixels: usize,
    pub chroma: Array3<f32>,
    pub warped: WarpedReference,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub lightness: Array2<f32>,
    pub imagination: Imagination,
    pub assignment: CompositionAssignment,
    pub rendering: Rendering,
}

impl PipelineOutput {
    pub fn result(&self) -> &RgbImage {
        &self.rendering.result
    }
}

/// Segment `lightness` and sample `params.n` candidates.
pub fn imagine(
    lightness: &Array2<f32>,
    params: &PipelineParams,
    registry: &BackendRegistry,
) -> Result<Imagination, PipelineError> {
    let seeds = params.seeds();
    let gray = LabImage::achromatic(lightness.clone()).map_err(|e| PipelineError::new(Stage::Input, e))?;
    let segmenter = registry.segmenter(&params.segmenter).map_err(|e| PipelineError::new(Stage::Context, e))?;
    let segmentation = extract_context(&gray, segmenter.as_ref()).map_err(|e| PipelineError::new(Stage::Context, e))?;
    let generator = registry.generator(&params.generator).map_err(|e| PipelineError::new(Stage::Generation, e))?;
    let references = sample_references(&segmentation, params.n, &seeds, generator.as_ref())
        .map_err(|e| PipelineError::new(Stage::Generation, e))?;
    Ok(Imagination { segmentation, references })
}

/// Assemble the reference for `assignment` and colorize with it.
pub fn render(
    lightness: &Array2<f32>,
    references: &ReferenceSet,
    assignment: &CompositionAssignment,
    model: &ColorizerModel,
) -> Result<Rendering, PipelineError> {
    let composed =
        assemble_reference(assignment, references, lightness).map_err(|e| PipelineError::new(Stage::Composition, e))?;
    let out = colorize(lightness, &composed.image, model).map_err(|e| PipelineError::new(Stage::Colorization, e))?;
    Ok(Rendering {
        composed,
        result: out.image.image,
        clipped_pixels: out.image.clipped_pixels,
        chroma: out.chroma,
        warped: out.warped,
    })
}

/// Run the whole flow on a gray (or color, whose chroma is dropped) image.
pub fn run_pipeline(
    input: &RgbImage,
    params: &PipelineParams,
    registry: &BackendRegistry,
    model: &ColorizerModel,
) -> Result<PipelineOutput, PipelineError> {
    let lightness = lightness_of(input);
    let imagination = imagine(&lightness, params, registry)?;
    let lum = lightness.mapv(|v| v / 100.0);
    let assignment =
        assign_segments(&lum, &imagination.references).map_err(|e| PipelineError::new(Stage::Composition, e))?;
    let rendering = render(&lightness, &imagination.references, &assignment, model)?;
    Ok(PipelineOutput { lightness, imagination, assignment, rendering })
}
