//! Bounding boxes, IoU and greedy per-label non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoxError {
    #[error("box coordinates must satisfy 0 <= min < max <= 1, got ({0}, {1}, {2}, {3})")]
    OutOfRange(f64, f64, f64, f64),
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(BoxError::OutOfRange(x_min, y_min, x_max, y_max))
        }
    }

    pub fn is_valid(&self) -> bool {
        0.0 <= self.x_min
            && self.x_min < self.x_max
            && self.x_max <= 1.0
            && 0.0 <= self.y_min
            && self.y_min < self.y_max
            && self.y_max <= 1.0
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    fn cmp_fields(&self, other: &BBox) -> Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    /// Checks box validity, confidence range and label bound.
    pub fn is_valid_for(&self, label_count: usize) -> bool {
        (self.label_id as usize) < label_count
            && self.bbox.is_valid()
            && (0.0..=1.0).contains(&self.confidence)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Priority order used by NMS: confidence descending, then label id
/// ascending, then box fields lexicographically.
pub fn priority_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.label_id.cmp(&b.label_id))
        .then(a.bbox.cmp_fields(&b.bbox))
}

/// Greedy per-label NMS. A detection is kept unless a higher-priority kept
/// detection with the same label overlaps it with IoU above `iou_threshold`.
/// The result is in priority order and holds at most `max_out` entries.
pub fn nms(dets: &[Detection], iou_threshold: f64, max_out: usize) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(priority_order);

    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len().min(max_out));
    for det in sorted {
        if kept.len() >= max_out {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.label_id == det.label_id && iou(&k.bbox, &det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Confidence filter followed by NMS; applied by the client to any engine's
/// raw output.
pub fn postprocess(
    raw: &[Detection],
    min_confidence: f64,
    iou_threshold: f64,
    max_out: usize,
) -> Vec<Detection> {
    let filtered: Vec<Detection> = raw
        .iter()
        .filter(|d| d.confidence >= min_confidence)
        .copied()
        .collect();
    nms(&filtered, iou_threshold, max_out)
}
