//! Validation of a model through the full imagine-compose-colorize flow.
//!
//! Outputs are snapped to the 8-bit grid before scoring, so the report
//! equals a metrics run over the dumped PNGs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::colorizer::{lightness_of, ColorizerModel};
use crate::colorspace::RgbImage;
use crate::imagination::BackendRegistry;
use crate::io::save_rgb;
use crate::metrics::{colorfulness, ColorfulnessReport};
use crate::pipeline::{run_pipeline, PipelineParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub name: String,
    pub colorfulness: f64,
    /// Mean `|L_out - L_in|` over pixels, after 8-bit quantisation.
    pub luminance_error: f64,
    pub clipped_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_colorfulness: f64,
    pub mean_luminance_error: f64,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    /// Scores keyed by dumped file name (`<name>.png`).
    pub fn colorfulness_report(&self) -> ColorfulnessReport {
        let scores: BTreeMap<String, f64> =
            self.entries.iter().map(|e| (format!("{}.png", e.name), e.colorfulness)).collect();
        ColorfulnessReport::from_scores(scores, Vec::new())
    }
}

/// Run every `(name, image)` through the pipeline. With `dump_dir`, each
/// output is written as `<name>.png`.
pub fn evaluate_checkpoint(
    model: &ColorizerModel,
    val: &[(String, RgbImage)],
    params: &PipelineParams,
    registry: &BackendRegistry,
    dump_dir: Option<&Path>,
) -> Result<EvalReport, TrainError> {
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut entries = Vec::with_capacity(val.len());
    for (name, img) in val {
        let out = run_pipeline(img, params, registry, model).map_err(|e| TrainError::Config(e.to_string()))?;
        let result = out.result().quantized();
        let (h, w) = result.dim();
        let l_in = &out.lightness;
        let l_out = lightness_of(&result);
        let luminance_error =
            l_out.iter().zip(l_in.iter()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / (h * w) as f64;
        if let Some(dir) = dump_dir {
            save_rgb(&result, dir.join(format!("{name}.png"))).map_err(|e| TrainError::Io(e.to_string()))?;
        }
        entries.push(EvalEntry {
            name: name.clone(),
            colorfulness: colorfulness(&result),
            luminance_error,
            clipped_fraction: out.rendering.clipped_pixels as f64 / (h * w) as f64,
        });
    }
    let count = entries.len();
    let mean = |f: fn(&EvalEntry) -> f64| if count == 0 { 0.0 } else { entries.iter().map(f).sum::<f64>() / count as f64 };
    Ok(EvalReport {
        count,
        mean_colorfulness: mean(|e| e.colorfulness),
        mean_luminance_error: mean(|e| e.luminance_error),
        entries,
    })
}
