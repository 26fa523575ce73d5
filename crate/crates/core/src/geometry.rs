//! Axis-aligned boxes, IoU and greedy non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class id used when a box carries no class (window proposals).
pub const CLASS_AGNOSTIC: u32 = u32::MAX;

/// Axis-aligned box in pixel coordinates, origin top-left.
///
/// Serializes as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Box covering a whole `width` x `height` image.
    pub fn image(width: u32, height: u32) -> Self {
        BBox { x1: 0.0, y1: 0.0, x2: width as f64, y2: height as f64 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::Domain(format!("invalid box {:?}", self.to_array())));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Continuous area, no +1 pixel correction.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// Intersection with `bounds`; collapses to a zero-area box on the bounds edge when disjoint.
    pub fn clip_to(&self, bounds: &BBox) -> BBox {
        let x1 = self.x1.clamp(bounds.x1, bounds.x2);
        let y1 = self.y1.clamp(bounds.y1, bounds.y2);
        let x2 = self.x2.clamp(bounds.x1, bounds.x2).max(x1);
        let y2 = self.y2.clamp(bounds.y1, bounds.y2).max(y1);
        BBox { x1, y1, x2, y2 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A box with a confidence score and a class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: u32,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, class_id: u32) -> Self {
        ScoredBox { bbox, score, class_id }
    }
}

/// Total order used by NMS: score descending, then (y1, x1, x2, y2) ascending, then class.
pub fn rank_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy NMS returning the indices of the survivors in rank order.
///
/// A box is suppressed by a higher-ranked survivor whose IoU with it exceeds
/// `iou_threshold`. With `class_aware`, only boxes of the same class suppress each other.
pub fn nms_indices(items: &[ScoredBox], iou_threshold: f64, class_aware: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| rank_order(&items[i], &items[j]).then(i.cmp(&j)));

    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let cand = &items[i];
        let suppressed = keep.iter().any(|&k| {
            let kept = &items[k];
            (!class_aware || kept.class_id == cand.class_id) && iou(&kept.bbox, &cand.bbox) > iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// Greedy NMS; output sorted by score descending with the deterministic tie-break of [`rank_order`].
pub fn nms(items: &[ScoredBox], iou_threshold: f64, class_aware: bool) -> Vec<ScoredBox> {
    nms_indices(items, iou_threshold, class_aware).into_iter().map(|i| items[i]).collect()
}
