use std::collections::{BTreeMap, VecDeque};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ImaginationError;

/// Segment id reserved for pixels the segmenter left unlabeled.
pub const FALLBACK_SEGMENT: u32 = 0;
/// Class id meaning "unlabeled" in segmenter output.
pub const UNLABELED_CLASS: u32 = 0;

/// Axis-aligned bounding box, half-open: rows `y0..y1`, columns `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
}

/// Partition of the image into segments, each tagged with a semantic class.
///
/// Segments are the 4-connected components of the segmenter's class map.
/// All unlabeled pixels (class 0) share the fallback segment 0, so every
/// pixel belongs to exactly one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    labels: Array2<u32>,
    class_of: BTreeMap<u32, u32>,
    segment_index: BTreeMap<u32, Vec<usize>>,
}

impl SegmentationMap {
    pub fn from_class_map(classes: &Array2<u32>) -> Result<Self, ImaginationError> {
        let (h, w) = classes.dim();
        if h == 0 || w == 0 {
            return Err(ImaginationError::DegenerateSegmentation("empty class map".into()));
        }
        let classes = classes.as_standard_layout();
        let flat = classes.as_slice().expect("standard layout");
        let mut labels = vec![u32::MAX; h * w];
        let mut class_of = BTreeMap::new();
        let mut next_id = FALLBACK_SEGMENT + 1;
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if labels[start] != u32::MAX {
                continue;
            }
            let class = flat[start];
            if class == UNLABELED_CLASS {
                labels[start] = FALLBACK_SEGMENT;
                class_of.insert(FALLBACK_SEGMENT, UNLABELED_CLASS);
                continue;
            }
            let id = next_id;
            next_id += 1;
            class_of.insert(id, class);
            labels[start] = id;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                let (y, x) = (p / w, p % w);
                let mut visit = |q: usize| {
                    if labels[q] == u32::MAX && flat[q] == class {
                        labels[q] = id;
                        queue.push_back(q);
                    }
                };
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
            }
        }
        let labels = Array2::from_shape_vec((h, w), labels).expect("sized from input");
        Self::from_parts(labels, class_of)
    }

    /// Rebuild from stored segment labels and their classes.
    pub fn from_parts(labels: Array2<u32>, class_of: BTreeMap<u32, u32>) -> Result<Self, ImaginationError> {
        let (h, w) = labels.dim();
        if h == 0 || w == 0 {
            return Err(ImaginationError::DegenerateSegmentation("empty label map".into()));
        }
        let labels = labels.as_standard_layout().into_owned();
        let mut segment_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, &id) in labels.iter().enumerate() {
            if !class_of.contains_key(&id) {
                return Err(ImaginationError::DegenerateSegmentation(format!(
                    "segment {id} has no class"
                )));
            }
            segment_index.entry(id).or_default().push(p);
        }
        let class_of = class_of.into_iter().filter(|(id, _)| segment_index.contains_key(id)).collect();
        Ok(Self { labels, class_of, segment_index })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Per-pixel segment ids.
    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    /// Per-pixel class ids, as consumed by semantic synthesis backends.
    pub fn class_labels(&self) -> Array2<u32> {
        self.labels.mapv(|id| self.class_of[&id])
    }

    pub fn class_of(&self, segment: u32) -> Option<u32> {
        self.class_of.get(&segment).copied()
    }

    pub fn classes(&self) -> &BTreeMap<u32, u32> {
        &self.class_of
    }

    /// Segment ids in ascending order.
    pub fn segment_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.segment_index.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.segment_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_index.is_empty()
    }

    pub fn contains(&self, segment: u32) -> bool {
        self.segment_index.contains_key(&segment)
    }

    /// Flat (row-major) pixel indices of a segment, ascending.
    pub fn pixels(&self, segment: u32) -> &[usize] {
        self.segment_index.get(&segment).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn bbox(&self, segment: u32) -> Option<BBox> {
        let w = self.dim().1;
        let pixels = self.segment_index.get(&segment)?;
        let mut bbox = BBox { y0: usize::MAX, x0: usize::MAX, y1: 0, x1: 0 };
        for &p in pixels {
            let (y, x) = (p / w, p % w);
            bbox.y0 = bbox.y0.min(y);
            bbox.x0 = bbox.x0.min(x);
            bbox.y1 = bbox.y1.max(y + 1);
            bbox.x1 = bbox.x1.max(x + 1);
        }
        Some(bbox)
    }
}
