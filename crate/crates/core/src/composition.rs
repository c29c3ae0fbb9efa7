//! Per-segment composition of the final reference.
//!
//! For every segment `j` the candidate whose luminance is closest to the
//! input's, in summed absolute difference over the segment's pixels, is
//! chosen:
//!
//! ```text
//! beta(j) = argmin_i  sum_{p in S_j} |lum(R_i)(p) - lum(X)(p)|
//! ```
//!
//! Ties go to the lowest reference index. The sums are stored so choices can
//! be audited and restored after interactive edits.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::colorspace::{gray_from_lightness, luminance_of, ColorError, RgbImage};
use crate::imagination::ReferenceSet;

#[derive(Debug, Error, PartialEq)]
pub enum CompositionError {
    #[error("luminance is {actual:?} but the segmentation is {expected:?}")]
    Shape { expected: (usize, usize), actual: (usize, usize) },
    #[error("unknown segment {0}")]
    UnknownSegment(u32),
    #[error("reference index {index} out of range for {count} references")]
    ReferenceIndex { index: usize, count: usize },
    #[error("assignment scores {assignment} references, the set holds {set}")]
    Inconsistent { assignment: usize, set: usize },
    #[error(transparent)]
    Color(#[from] ColorError),
}

/// The reference chosen for a segment. Serialized as the index, or -1 when excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Reference(usize),
    Excluded,
}

impl Choice {
    pub fn index(self) -> Option<usize> {
        match self {
            Choice::Reference(i) => Some(i),
            Choice::Excluded => None,
        }
    }
}

impl Serialize for Choice {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Choice::Reference(i) => s.serialize_i64(*i as i64),
            Choice::Excluded => s.serialize_i64(-1),
        }
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        match v {
            -1 => Ok(Choice::Excluded),
            v if v >= 0 => Ok(Choice::Reference(v as usize)),
            v => Err(serde::de::Error::custom(format!("invalid reference index {v}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EditAction {
    /// Drop the segment's reference color entirely.
    Exclude,
    /// Use candidate `index` regardless of its score.
    SetReference { index: usize },
    /// Return to the automatic choice.
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub segment_id: u32,
    pub action: EditAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionAssignment {
    beta: BTreeMap<u32, Choice>,
    scores: BTreeMap<u32, Vec<f64>>,
    edit_log: Vec<EditRecord>,
}

fn argmin_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

impl CompositionAssignment {
    pub fn beta(&self) -> &BTreeMap<u32, Choice> {
        &self.beta
    }

    pub fn choice(&self, segment: u32) -> Option<Choice> {
        self.beta.get(&segment).copied()
    }

    pub fn scores(&self) -> &BTreeMap<u32, Vec<f64>> {
        &self.scores
    }

    pub fn edit_log(&self) -> &[EditRecord] {
        &self.edit_log
    }

    /// Number of candidates the scores were computed against.
    pub fn reference_count(&self) -> usize {
        self.scores.values().next().map_or(0, Vec::len)
    }

    /// The score-minimizing choice for a segment.
    pub fn automatic_choice(&self, segment: u32) -> Option<Choice> {
        self.scores.get(&segment).map(|s| Choice::Reference(argmin_lowest(s)))
    }

    pub fn is_edited(&self, segment: u32) -> bool {
        self.choice(segment) != self.automatic_choice(segment)
    }

    /// Same scores, automatic choices everywhere, empty edit log.
    pub fn reset_all(&self) -> Self {
        let beta = self.scores.iter().map(|(&j, s)| (j, Choice::Reference(argmin_lowest(s)))).collect();
        Self { beta, scores: self.scores.clone(), edit_log: Vec::new() }
    }

    pub fn same_choices(&self, other: &Self) -> bool {
        self.beta == other.beta
    }
}

/// Choose, per segment, the candidate nearest in luminance to `gray_lum`
/// (values in `[0, 1]`). Candidate luminance is the Lab `L` channel / 100.
pub fn assign_segments(
    gray_lum: &Array2<f32>,
    refs: &ReferenceSet,
) -> Result<CompositionAssignment, CompositionError> {
    let seg = &refs.segmentation;
    if gray_lum.dim() != seg.dim() {
        return Err(CompositionError::Shape { expected: seg.dim(), actual: gray_lum.dim() });
    }
    let gray = gray_lum.as_standard_layout();
    let gray = gray.as_slice().expect("standard layout");
    let candidate_lum: Vec<Array2<f32>> = refs.references.iter().map(luminance_of).collect();

    let mut beta = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for j in seg.segment_ids() {
        let pixels = seg.pixels(j);
        if pixels.is_empty() {
            log::warn!("segment {j} is empty, skipping");
            continue;
        }
        let sums: Vec<f64> = candidate_lum
            .iter()
            .map(|lum| {
                let lum = lum.as_slice().expect("fresh array");
                pixels.iter().map(|&p| (lum[p] as f64 - gray[p] as f64).abs()).sum()
            })
            .collect();
        beta.insert(j, Choice::Reference(argmin_lowest(&sums)));
        scores.insert(j, sums);
    }
    Ok(CompositionAssignment { beta, scores, edit_log: Vec::new() })
}

/// Assembled reference plus where each pixel came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedReference {
    pub image: RgbImage,
    /// Source reference index per pixel, -1 where excluded.
    pub provenance: Array2<i32>,
    pub excluded_mask: Array2<bool>,
}

/// Copy each segment from its chosen candidate. Excluded segments are filled
/// with the achromatic rendering of `lightness` (Lab `L`, `[0, 100]`).
pub fn assemble_reference(
    assignment: &CompositionAssignment,
    refs: &ReferenceSet,
    lightness: &Array2<f32>,
) -> Result<ComposedReference, CompositionError> {
    let seg = &refs.segmentation;
    let (h, w) = seg.dim();
    if lightness.dim() != (h, w) {
        return Err(CompositionError::Shape { expected: (h, w), actual: lightness.dim() });
    }
    if assignment.reference_count() != refs.len() {
        return Err(CompositionError::Inconsistent { assignment: assignment.reference_count(), set: refs.len() });
    }
    let gray = gray_from_lightness(lightness)?;
    let mut pixels = Array3::zeros((h, w, 3));
    let mut provenance = Array2::from_elem((h, w), -1);
    let mut excluded_mask = Array2::from_elem((h, w), false);
    for j in seg.segment_ids() {
        let choice = assignment.choice(j).ok_or(CompositionError::UnknownSegment(j))?;
        let source = match choice {
            Choice::Reference(i) if i >= refs.len() => {
                return Err(CompositionError::ReferenceIndex { index: i, count: refs.len() })
            }
            Choice::Reference(i) => Some(i),
            Choice::Excluded => None,
        };
        for &p in seg.pixels(j) {
            let (y, x) = (p / w, p % w);
            let px = match source {
                Some(i) => {
                    provenance[[y, x]] = i as i32;
                    refs.references[i].get(y, x)
                }
                None => {
                    excluded_mask[[y, x]] = true;
                    gray.get(y, x)
                }
            };
            for c in 0..3 {
                pixels[[y, x, c]] = px[c];
            }
        }
    }
    Ok(ComposedReference { image: RgbImage::new(pixels)?, provenance, excluded_mask })
}

/// Apply one interactive edit. The input is left untouched; on error no
/// new assignment is produced.
pub fn edit_assignment(
    assignment: &CompositionAssignment,
    segment_id: u32,
    action: EditAction,
) -> Result<CompositionAssignment, CompositionError> {
    let automatic = assignment.automatic_choice(segment_id).ok_or(CompositionError::UnknownSegment(segment_id))?;
    let choice = match action {
        EditAction::Exclude => Choice::Excluded,
        EditAction::Reset => automatic,
        EditAction::SetReference { index } => {
            let count = assignment.reference_count();
            if index >= count {
                return Err(CompositionError::ReferenceIndex { index, count });
            }
            Choice::Reference(index)
        }
    };
    let mut next = assignment.clone();
    next.beta.insert(segment_id, choice);
    next.edit_log.push(EditRecord { segment_id, action });
    Ok(next)
}
