//! Reference detection engine `refdet/1`.
//!
//! The image is split into an S x S grid. Each cell's mean color is scored
//! against one color prototype per label; cells scoring at or above the
//! threshold become candidate boxes, which then go through NMS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon;
use crate::detect::{nms, BBox, Detection};
use crate::manifest::Rgb;
use crate::raster::RgbImage;

pub const ENGINE_ID: &str = "refdet/1";

/// Largest possible Euclidean distance between two 8-bit RGB colors,
/// `sqrt(3 * 255^2)`.
pub fn max_color_distance() -> f64 {
    195_075f64.sqrt()
}

#[derive(Debug, Error)]
pub enum RefDetError {
    #[error("invalid refdet model: {0}")]
    Invalid(String),
    #[error("malformed refdet payload: {0}")]
    Payload(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefDetModel {
    pub grid: u32,
    /// One prototype color per label, indexed by label id.
    pub prototypes: Vec<Rgb>,
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: u32,
}

impl RefDetModel {
    pub fn validate(&self, label_count: Option<usize>) -> Result<(), RefDetError> {
        if !(2..=64).contains(&self.grid) {
            return Err(RefDetError::Invalid(format!(
                "grid {} not in [2, 64]",
                self.grid
            )));
        }
        if self.prototypes.is_empty() {
            return Err(RefDetError::Invalid("no prototypes".into()));
        }
        if let Some(n) = label_count {
            if self.prototypes.len() != n {
                return Err(RefDetError::Invalid(format!(
                    "{} prototypes for {n} labels",
                    self.prototypes.len()
                )));
            }
        }
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RefDetError::Invalid(format!("{name} {v} not in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Canonical JSON payload stored as `model.bin` in a bundle.
    pub fn to_payload(&self) -> Vec<u8> {
        canon::to_vec(self).expect("refdet model serializes")
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, RefDetError> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// Pixel span `[start, end)` of grid cell `index` along an axis of `len` pixels.
pub fn cell_span(index: u32, grid: u32, len: u32) -> (u32, u32) {
    let start = (index as u64 * len as u64 / grid as u64) as u32;
    let end = ((index as u64 + 1) * len as u64 / grid as u64) as u32;
    (start, end)
}

fn cell_mean(image: &RgbImage, xs: (u32, u32), ys: (u32, u32)) -> [f64; 3] {
    let mut sum = [0u64; 3];
    let raw = image.as_raw();
    let stride = image.width() as usize * 3;
    for y in ys.0..ys.1 {
        let row = &raw[y as usize * stride..][xs.0 as usize * 3..xs.1 as usize * 3];
        for px in row.chunks_exact(3) {
            sum[0] += px[0] as u64;
            sum[1] += px[1] as u64;
            sum[2] += px[2] as u64;
        }
    }
    let n = ((xs.1 - xs.0) as u64 * (ys.1 - ys.0) as u64) as f64;
    [sum[0] as f64 / n, sum[1] as f64 / n, sum[2] as f64 / n]
}

/// Score of a mean color against a prototype: `max(0, 1 - dist / max_dist)`.
pub fn prototype_score(mean: [f64; 3], prototype: Rgb) -> f64 {
    let dr = mean[0] - prototype.0[0] as f64;
    let dg = mean[1] - prototype.0[1] as f64;
    let db = mean[2] - prototype.0[2] as f64;
    let dist = (dr * dr + dg * dg + db * db).sqrt();
    (1.0 - dist / max_color_distance()).max(0.0)
}

/// Candidate detections before NMS, in row-major cell order.
pub fn candidates(model: &RefDetModel, image: &RgbImage) -> Vec<Detection> {
    let (w, h) = (image.width(), image.height());
    let mut out = Vec::new();
    for row in 0..model.grid {
        let ys = cell_span(row, model.grid, h);
        if ys.0 == ys.1 {
            continue;
        }
        for col in 0..model.grid {
            let xs = cell_span(col, model.grid, w);
            if xs.0 == xs.1 {
                continue;
            }
            let mean = cell_mean(image, xs, ys);
            let bbox = BBox {
                x_min: xs.0 as f64 / w as f64,
                y_min: ys.0 as f64 / h as f64,
                x_max: xs.1 as f64 / w as f64,
                y_max: ys.1 as f64 / h as f64,
            };
            for (label_id, proto) in model.prototypes.iter().enumerate() {
                let confidence = prototype_score(mean, *proto);
                if confidence >= model.score_threshold {
                    out.push(Detection {
                        label_id: label_id as u32,
                        bbox,
                        confidence,
                    });
                }
            }
        }
    }
    out
}

/// Runs the reference detector: cell scoring followed by NMS.
pub fn infer(model: &RefDetModel, image: &RgbImage) -> Vec<Detection> {
    nms(
        &candidates(model, image),
        model.nms_iou_threshold,
        model.max_detections as usize,
    )
}
