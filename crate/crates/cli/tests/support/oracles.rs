//! Independent re-derivations used to check the engine. None of these call
//! into the detection or snapshot code they are checking.

#![allow(dead_code)]

use std::cmp::Ordering;

use fieldforge_core::protocol::{StoredObservation, Verdict};
use fieldforge_core::refdet::RefDetModel;
use fieldforge_core::{BBox, Detection};

/// A box on an integer lattice of `q` steps per unit side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl GridBox {
    pub fn to_bbox(self, q: u32) -> BBox {
        let f = |v: u32| v as f64 / q as f64;
        BBox::new(f(self.x0), f(self.y0), f(self.x1), f(self.y1)).unwrap()
    }

    fn contains_cell(&self, cx: u32, cy: u32) -> bool {
        self.x0 <= cx && cx < self.x1 && self.y0 <= cy && cy < self.y1
    }
}

/// Every box with positive area on a `q`-step lattice.
pub fn all_grid_boxes(q: u32) -> Vec<GridBox> {
    let mut out = Vec::new();
    for x0 in 0..q {
        for x1 in x0 + 1..=q {
            for y0 in 0..q {
                for y1 in y0 + 1..=q {
                    out.push(GridBox { x0, y0, x1, y1 });
                }
            }
        }
    }
    out
}

/// IoU by counting lattice cells covered by both / either box.
pub fn iou_by_cells(a: GridBox, b: GridBox, q: u32) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for cy in 0..q {
        for cx in 0..q {
            let (ia, ib) = (a.contains_cell(cx, cy), b.contains_cell(cx, cy));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

/// A detection whose box lives on a lattice, so overlaps are exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDet {
    pub label_id: u32,
    pub gbox: GridBox,
    pub confidence: f64,
}

impl GridDet {
    pub fn to_detection(self, q: u32) -> Detection {
        Detection {
            label_id: self.label_id,
            bbox: self.gbox.to_bbox(q),
            confidence: self.confidence,
        }
    }
}

/// Strict priority between input positions `i` and `j`: higher confidence,
/// then lower label, then smaller box coordinates, then earlier position.
fn outranks(dets: &[GridDet], i: usize, j: usize) -> bool {
    let key = |d: &GridDet| (d.label_id, d.gbox.x0, d.gbox.y0, d.gbox.x1, d.gbox.y1);
    let (a, b) = (&dets[i], &dets[j]);
    match b.confidence.partial_cmp(&a.confidence).unwrap() {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => match key(a).cmp(&key(b)) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => i < j,
        },
    }
}

/// NMS by subset enumeration: the kept set is the unique subset `K` with
/// `d in K <=> no k in K outranks d, shares its label and overlaps it by
/// more than the threshold`. The result lists `K` by priority, truncated.
pub fn nms_fixed_point(dets: &[GridDet], q: u32, threshold: f64, max_out: usize) -> Vec<GridDet> {
    let n = dets.len();
    assert!(n <= 12, "subset enumeration is exponential");
    // suppressors[d]: bitmask of every k that would suppress d if kept
    let suppressors: Vec<u32> = (0..n)
        .map(|d| {
            (0..n)
                .filter(|&k| {
                    k != d
                        && outranks(dets, k, d)
                        && dets[k].label_id == dets[d].label_id
                        && iou_by_cells(dets[k].gbox, dets[d].gbox, q) > threshold
                })
                .fold(0, |m, k| m | 1 << k)
        })
        .collect();
    let mut solutions = Vec::new();
    for mask in 0u32..(1 << n) {
        let stable = (0..n).all(|d| (mask & (1 << d) != 0) == (mask & suppressors[d] == 0));
        if stable {
            solutions.push(mask);
        }
    }
    assert_eq!(
        solutions.len(),
        1,
        "greedy suppression has exactly one fixed point"
    );
    let mut kept: Vec<usize> = (0..n).filter(|i| solutions[0] & (1 << i) != 0).collect();
    kept.sort_by(|&i, &j| {
        if outranks(dets, i, j) {
            Ordering::Less
        } else {
            Ordering::Greater
        }
    });
    kept.into_iter().take(max_out).map(|i| dets[i]).collect()
}

/// The reference detector written out from its definition: per-cell pixel
/// sums over `[floor(i*len/S), floor((i+1)*len/S))`, Euclidean distance to
/// each prototype, thresholding, then greedy same-label suppression.
pub fn refdet_by_cell_means(model: &RefDetModel, rgb: &[u8], w: u32, h: u32) -> Vec<Detection> {
    let s = model.grid as u64;
    let max_dist = (3.0f64 * 255.0 * 255.0).sqrt();
    let mut cands: Vec<(usize, Detection)> = Vec::new();
    for r in 0..s {
        let (y0, y1) = ((r * h as u64 / s) as u32, ((r + 1) * h as u64 / s) as u32);
        for c in 0..s {
            let (x0, x1) = ((c * w as u64 / s) as u32, ((c + 1) * w as u64 / s) as u32);
            if y0 == y1 || x0 == x1 {
                continue;
            }
            let mut sums = [0u64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = (y as usize * w as usize + x as usize) * 3;
                    for ch in 0..3 {
                        sums[ch] += rgb[p + ch] as u64;
                    }
                }
            }
            let count = ((x1 - x0) * (y1 - y0)) as f64;
            let mean = sums.map(|v| v as f64 / count);
            for (label, proto) in model.prototypes.iter().enumerate() {
                let d = [
                    mean[0] - proto.0[0] as f64,
                    mean[1] - proto.0[1] as f64,
                    mean[2] - proto.0[2] as f64,
                ];
                let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let score = f64::max(0.0, 1.0 - dist / max_dist);
                if score >= model.score_threshold {
                    let bbox = BBox {
                        x_min: x0 as f64 / w as f64,
                        y_min: y0 as f64 / h as f64,
                        x_max: x1 as f64 / w as f64,
                        y_max: y1 as f64 / h as f64,
                    };
                    cands.push((
                        cands.len(),
                        Detection {
                            label_id: label as u32,
                            bbox,
                            confidence: score,
                        },
                    ));
                }
            }
        }
    }
    let key = |d: &Detection| {
        (
            d.label_id,
            d.bbox.x_min,
            d.bbox.y_min,
            d.bbox.x_max,
            d.bbox.y_max,
        )
    };
    cands.sort_by(|(i, a), (j, b)| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(key(a).partial_cmp(&key(b)).unwrap())
            .then(i.cmp(j))
    });
    let overlap = |a: &BBox, b: &BBox| {
        let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
        let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
        let inter = iw * ih;
        let area = |x: &BBox| (x.x_max - x.x_min) * (x.y_max - x.y_min);
        inter / (area(a) + area(b) - inter)
    };
    let mut kept: Vec<Detection> = Vec::new();
    for (_, d) in cands {
        if kept.len() == model.max_detections as usize {
            break;
        }
        if !kept.iter().any(|k| {
            k.label_id == d.label_id && overlap(&k.bbox, &d.bbox) > model.nms_iou_threshold
        }) {
            kept.push(d);
        }
    }
    kept
}

/// Snapshot annotations re-derived from stored rows and their review
/// history: (content digest, detection, source) in listing order.
pub fn snapshot_annotations(rows: &[StoredObservation]) -> Vec<(String, Detection, &'static str)> {
    let mut out = Vec::new();
    for row in rows {
        let Some(latest) = row.review_history.last() else {
            continue;
        };
        let (dets, source): (&[Detection], _) = match latest.verdict {
            Verdict::Confirm => (&row.detections, "model"),
            Verdict::Correct => (&latest.corrected_detections, "expert"),
            Verdict::Refute => (&[], "model"),
        };
        out.extend(
            dets.iter()
                .map(|d| (row.content_digest.clone(), *d, source)),
        );
    }
    out
}
