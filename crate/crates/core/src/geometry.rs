//! Axis-aligned boxes, IoU, box-delta coding and non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Box in image pixel coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BoxRegion {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn whole(width: usize, height: usize) -> Self {
        Self::new(0.0, 0.0, width as f32, height as f32)
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(b: [f32; 4]) -> Self {
        Self::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
    }

    pub fn to_xywh(&self) -> [f32; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: usize, height: usize) -> Self {
        let (w, h) = (width as f32, height as f32);
        Self::new(
            self.x0.clamp(0.0, w),
            self.y0.clamp(0.0, h),
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
        )
    }

    pub fn intersection(&self, other: &Self) -> f32 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &Self) -> f32 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn hflip(&self, width: usize) -> Self {
        let w = width as f32;
        Self::new(w - self.x1, self.y0, w - self.x0, self.y1)
    }
}

/// Weights applied to `(dx, dy, dw, dh)` targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaWeights(pub [f32; 4]);

pub const RPN_DELTA_WEIGHTS: DeltaWeights = DeltaWeights([1.0, 1.0, 1.0, 1.0]);
pub const ROI_DELTA_WEIGHTS: DeltaWeights = DeltaWeights([10.0, 10.0, 5.0, 5.0]);

/// Largest log-scale step a decoded delta may take.
const MAX_LOG_SCALE: f32 = 4.135_166_6; // ln(1000 / 16)

/// Center-offset / log-scale encoding of `target` relative to `reference`.
pub fn encode_deltas(reference: &BoxRegion, target: &BoxRegion, w: DeltaWeights) -> [f32; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let (tw, th) = (target.width(), target.height());
    let (tx, ty) = target.center();
    [
        w.0[0] * (tx - rx) / rw,
        w.0[1] * (ty - ry) / rh,
        w.0[2] * (tw / rw).ln(),
        w.0[3] * (th / rh).ln(),
    ]
}

pub fn decode_deltas(reference: &BoxRegion, d: [f32; 4], w: DeltaWeights) -> BoxRegion {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let dx = d[0] / w.0[0];
    let dy = d[1] / w.0[1];
    let dw = (d[2] / w.0[2]).min(MAX_LOG_SCALE);
    let dh = (d[3] / w.0[3]).min(MAX_LOG_SCALE);
    let cx = rx + dx * rw;
    let cy = ry + dy * rh;
    let nw = rw * dw.exp();
    let nh = rh * dh.exp();
    BoxRegion::new(cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh)
}

/// Greedy NMS. `order` must already be sorted by descending score (ties
/// broken by the caller); returns the kept positions into `order`.
pub fn nms_sorted(boxes: &[BoxRegion], order: &[usize], iou_threshold: f32) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; order.len()];
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        keep.push(order[i]);
        let bi = boxes[order[i]];
        for j in i + 1..order.len() {
            if !suppressed[j] && bi.iou(&boxes[order[j]]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Indices sorted by score descending, ties by ascending index.
pub fn argsort_desc(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// NMS over `(box, score)` candidates; returns kept indices ordered by
/// descending score.
pub fn nms(boxes: &[BoxRegion], scores: &[f32], iou_threshold: f32) -> Vec<usize> {
    let order = argsort_desc(scores);
    nms_sorted(boxes, &order, iou_threshold)
}
