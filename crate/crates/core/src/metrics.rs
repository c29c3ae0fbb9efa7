//! Colorfulness (Hasler and Suesstrunk), diversity across seeds, directory
//! reports and the pairing sheet for side-by-side preference studies.
//!
//! Colorfulness is computed on RGB scaled to `[0, 1]` with population
//! statistics. It is not invariant to resizing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::{rgb_to_lab, RgbImage};
use crate::io::{image_files, load_rgb};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("diversity needs at least 2 outputs, got {0}")]
    TooFewOutputs(usize),
    #[error("output {index} is {actual:?}, expected {expected:?}")]
    Shape { index: usize, expected: (usize, usize), actual: (usize, usize) },
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("report encoding: {0}")]
    Json(#[from] serde_json::Error),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Fs { path: path.to_path_buf(), source }
}

/// `sqrt(var_rg + var_yb) + 0.3 * sqrt(mean_rg^2 + mean_yb^2)` with
/// `rg = R - G`, `yb = (R + G) / 2 - B`.
pub fn colorfulness(img: &RgbImage) -> f64 {
    let opponents: Vec<(f64, f64)> = img
        .pixels()
        .rows()
        .into_iter()
        .map(|px| {
            let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
            (r - g, 0.5 * (r + g) - b)
        })
        .collect();
    let n = opponents.len() as f64;
    let m_rg = opponents.iter().map(|o| o.0).sum::<f64>() / n;
    let m_yb = opponents.iter().map(|o| o.1).sum::<f64>() / n;
    let var_rg = opponents.iter().map(|o| (o.0 - m_rg).powi(2)).sum::<f64>() / n;
    let var_yb = opponents.iter().map(|o| (o.1 - m_yb).powi(2)).sum::<f64>() / n;
    (var_rg + var_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean over unordered pairs of the per-pixel mean of `|da| + |db|`.
    pub mean_pairwise_distance: f64,
    pub pair_count: usize,
    pub colorfulness: Vec<f64>,
    pub threshold: f64,
    pub diverse: bool,
}

/// Per-pixel mean of `|da| + |db|` between two chroma fields.
pub fn chroma_distance(a: &ndarray::Array3<f32>, b: &ndarray::Array3<f32>) -> f64 {
    let n = (a.len() / 2).max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / n
}

/// Diversity of several outputs for one input. `diverse` is set when the
/// mean pairwise distance exceeds `threshold`.
pub fn diversity_report(outputs: &[RgbImage], threshold: f64) -> Result<DiversityReport, MetricsError> {
    if outputs.len() < 2 {
        return Err(MetricsError::TooFewOutputs(outputs.len()));
    }
    let expected = outputs[0].dim();
    if let Some((index, img)) = outputs.iter().enumerate().find(|(_, o)| o.dim() != expected) {
        return Err(MetricsError::Shape { index, expected, actual: img.dim() });
    }
    let chroma: Vec<_> = outputs.iter().map(|o| rgb_to_lab(o).into_parts().1).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..chroma.len() {
        for j in i + 1..chroma.len() {
            total += chroma_distance(&chroma[i], &chroma[j]);
            pairs += 1;
        }
    }
    let mean = total / pairs as f64;
    Ok(DiversityReport {
        mean_pairwise_distance: mean,
        pair_count: pairs,
        colorfulness: outputs.iter().map(colorfulness).collect(),
        threshold,
        diverse: mean > threshold,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColorfulnessReport {
    pub mean: f64,
    pub count: usize,
    pub scores: BTreeMap<String, f64>,
    /// Files that could not be decoded.
    pub skipped: Vec<String>,
}

impl ColorfulnessReport {
    pub fn from_scores(scores: BTreeMap<String, f64>, skipped: Vec<String>) -> Self {
        let count = scores.len();
        let mean = if count == 0 { 0.0 } else { scores.values().sum::<f64>() / count as f64 };
        ColorfulnessReport { mean, count, scores, skipped }
    }
}

/// Score every PNG/JPEG directly inside `dir`.
pub fn score_directory(dir: &Path) -> Result<ColorfulnessReport, MetricsError> {
    let files = image_files(dir).map_err(fs_err(dir))?;
    let results: Vec<(String, Option<f64>)> = files
        .par_iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            match load_rgb(p) {
                Ok(img) => (name, Some(colorfulness(&img))),
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    (name, None)
                }
            }
        })
        .collect();
    let mut scores = BTreeMap::new();
    let mut skipped = Vec::new();
    for (name, score) in results {
        match score {
            Some(s) => {
                scores.insert(name, s);
            }
            None => skipped.push(name),
        }
    }
    Ok(ColorfulnessReport::from_scores(scores, skipped))
}

/// Score each `(method, dir)` and write the JSON report, keyed by method,
/// to `report_path`. A text table is written next to it with extension `txt`.
pub fn evaluate_directory(
    methods: &[(String, PathBuf)],
    report_path: Option<&Path>,
) -> Result<BTreeMap<String, ColorfulnessReport>, MetricsError> {
    let mut reports = BTreeMap::new();
    for (method, dir) in methods {
        reports.insert(method.clone(), score_directory(dir)?);
    }
    if let Some(path) = report_path {
        let json = serde_json::to_string_pretty(&reports)?;
        std::fs::write(path, json + "\n").map_err(fs_err(path))?;
        let table_path = path.with_extension("txt");
        std::fs::write(&table_path, colorfulness_table(&reports)).map_err(fs_err(&table_path))?;
    }
    Ok(reports)
}

/// Methods as columns, one row of mean colorfulness, one of image counts.
pub fn colorfulness_table(reports: &BTreeMap<String, ColorfulnessReport>) -> String {
    let width = reports.keys().map(|k| k.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<14}", "Method");
    for method in reports.keys() {
        let _ = write!(out, " | {method:>width$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(14 + reports.len() * (width + 3)));
    out.push('\n');
    let _ = write!(out, "{:<14}", "Colorfulness");
    for r in reports.values() {
        let _ = write!(out, " | {:>width$.3}", r.mean);
    }
    out.push('\n');
    let _ = write!(out, "{:<14}", "Images");
    for r in reports.values() {
        let _ = write!(out, " | {:>width$}", r.count);
    }
    out.push('\n');
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingRow {
    pub trial: usize,
    pub image: String,
    pub left_method: String,
    pub right_method: String,
    pub left_path: PathBuf,
    pub right_path: PathBuf,
}

/// Every method pair for every image present in all method directories,
/// with seeded left/right placement and trial order.
pub fn pairing_sheet(methods: &[(String, PathBuf)], seed: u64) -> Result<Vec<PairingRow>, MetricsError> {
    let mut common: Option<Vec<String>> = None;
    for (_, dir) in methods {
        let names: Vec<String> = image_files(dir)
            .map_err(fs_err(dir))?
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        common = Some(match common {
            None => names,
            Some(prev) => prev.into_iter().filter(|n| names.binary_search(n).is_ok()).collect(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for image in common.unwrap_or_default() {
        for i in 0..methods.len() {
            for j in i + 1..methods.len() {
                let (mut l, mut r) = (&methods[i], &methods[j]);
                if rng.gen_bool(0.5) {
                    std::mem::swap(&mut l, &mut r);
                }
                rows.push(PairingRow {
                    trial: 0,
                    image: image.clone(),
                    left_method: l.0.clone(),
                    right_method: r.0.clone(),
                    left_path: l.1.join(&image),
                    right_path: r.1.join(&image),
                });
            }
        }
    }
    rows.shuffle(&mut rng);
    for (k, row) in rows.iter_mut().enumerate() {
        row.trial = k + 1;
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn pairing_csv(rows: &[PairingRow]) -> String {
    let mut out = String::from("trial,image,left_method,right_method,left_path,right_path\n");
    for r in rows {
        let fields = [
            r.trial.to_string(),
            r.image.clone(),
            r.left_method.clone(),
            r.right_method.clone(),
            r.left_path.display().to_string(),
            r.right_path.display().to_string(),
        ];
        out.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}
