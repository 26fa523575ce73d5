//! Crop detections back to image coordinates, entropy-aware boosting and score fusion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, rank_order, BBox, ScoredBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Weight of the original score in a fused pair.
    pub alpha: f64,
    pub final_nms_iou: f64,
    pub confidence_threshold: f64,
    pub boost_enabled: bool,
    pub fusion_enabled: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 0.7,
            final_nms_iou: 0.5,
            confidence_threshold: 0.3,
            boost_enabled: true,
            fusion_enabled: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha={} outside [0,1]", self.alpha)));
        }
        if !(self.final_nms_iou > 0.0 && self.final_nms_iou <= 1.0) {
            return Err(Error::Config(format!("final_nms_iou={} outside (0,1]", self.final_nms_iou)));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence_threshold={} outside [0,1]",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Coordinate convention of a detector box relative to the region it was run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxFormat {
    /// Center and size as fractions of the region, each in `[0, 1]`.
    CxcywhNorm,
    /// Corner pixels in the region's own frame at source resolution.
    XyxyAbs,
}

/// A detection as returned by a detector for one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropDetection {
    #[serde(rename = "box")]
    pub coords: [f64; 4],
    pub box_format: BoxFormat,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: u32,
    #[serde(default, skip)]
    pub source_window: Option<usize>,
}

impl CropDetection {
    pub fn validate(&self) -> Result<()> {
        if !self.coords.iter().all(|v| v.is_finite()) || !self.score.is_finite() {
            return Err(Error::Backend(format!("non-finite detection {:?}", self.coords)));
        }
        if self.box_format == BoxFormat::CxcywhNorm && self.coords.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Backend(format!("normalized box {:?} outside [0,1]", self.coords)));
        }
        Ok(())
    }
}

/// Maps a region-frame detection into image pixels, clipped to the region and the image.
pub fn back_project(d: &CropDetection, window: &BBox, image: &BBox) -> Result<ScoredBox> {
    if !(window.width() > 0.0 && window.height() > 0.0) {
        return Err(Error::Domain(format!("window {:?} has no area", window.to_array())));
    }
    let [a, b, c, e] = d.coords;
    let (x1, y1, x2, y2) = match d.box_format {
        BoxFormat::CxcywhNorm => {
            let (ww, wh) = (window.width(), window.height());
            (
                window.x1 + (a - c / 2.0) * ww,
                window.y1 + (b - e / 2.0) * wh,
                window.x1 + (a + c / 2.0) * ww,
                window.y1 + (b + e / 2.0) * wh,
            )
        }
        BoxFormat::XyxyAbs => (window.x1 + a, window.y1 + b, window.x1 + c, window.y1 + e),
    };
    let bounds = window.clip_to(image);
    let raw = BBox { x1: x1.min(x2), y1: y1.min(y2), x2: x1.max(x2), y2: y1.max(y2) };
    Ok(ScoredBox::new(raw.clip_to(&bounds), d.score.clamp(0.0, 1.0), d.class_id))
}

/// Image box to the region-normalized `(cx, cy, w, h)` frame; inverse of [`back_project`].
pub fn to_crop_normalized(b: &BBox, window: &BBox) -> [f64; 4] {
    let (ww, wh) = (window.width(), window.height());
    let (cx, cy) = b.center();
    [(cx - window.x1) / ww, (cy - window.y1) / wh, b.width() / ww, b.height() / wh]
}

/// `s (1 + 0.2 (h - 0.7))` clamped to `[0, 1]`; identity when disabled.
pub fn boost_score(score: f64, window_entropy: f64, enabled: bool) -> f64 {
    if !enabled {
        return score;
    }
    (score * (1.0 + 0.2 * (window_entropy - 0.7))).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Full,
    Crop,
}

/// A final detection in image coordinates with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: u32,
    pub origin: Origin,
    pub window: Option<usize>,
}

impl Detection {
    pub fn full(sb: ScoredBox) -> Self {
        Detection {
            bbox: sb.bbox,
            score: sb.score,
            class_id: sb.class_id,
            origin: Origin::Full,
            window: None,
        }
    }

    pub fn crop(sb: ScoredBox, window: usize) -> Self {
        Detection {
            bbox: sb.bbox,
            score: sb.score,
            class_id: sb.class_id,
            origin: Origin::Crop,
            window: Some(window),
        }
    }

    pub fn scored(&self) -> ScoredBox {
        ScoredBox::new(self.bbox, self.score, self.class_id)
    }
}

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    rank_order(&a.scored(), &b.scored()).then(a.window.cmp(&b.window))
}

/// Merges refined crop detections into the full-image detections.
///
/// Each refined box (highest score first) pairs with the unpaired same-class original
/// of highest IoU above `final_nms_iou`. With fusion enabled the pair collapses into
/// the higher-scoring box carrying `alpha s_o + (1 - alpha) s_r`. The pool then goes
/// through class-wise NMS and the confidence threshold.
pub fn fuse_detections(original: &[Detection], refined: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let mut refined_sorted: Vec<Detection> = refined.to_vec();
    refined_sorted.sort_by(detection_order);

    let mut pool: Vec<Detection> = Vec::with_capacity(original.len() + refined.len());
    let mut paired = vec![false; original.len()];

    for r in refined_sorted {
        let partner = if cfg.fusion_enabled {
            original
                .iter()
                .enumerate()
                .filter(|(i, o)| !paired[*i] && o.class_id == r.class_id)
                .map(|(i, o)| (i, iou(&o.bbox, &r.bbox)))
                .filter(|&(_, v)| v > cfg.final_nms_iou)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
        } else {
            None
        };
        match partner {
            Some(i) => {
                paired[i] = true;
                let o = original[i];
                let fused = cfg.alpha * o.score + (1.0 - cfg.alpha) * r.score;
                let mut keep = if o.score >= r.score { o } else { r };
                keep.score = fused;
                pool.push(keep);
            }
            None => pool.push(r),
        }
    }
    pool.extend(original.iter().zip(&paired).filter(|(_, &p)| !p).map(|(o, _)| *o));
    pool.sort_by(detection_order);

    let boxes: Vec<ScoredBox> = pool.iter().map(Detection::scored).collect();
    nms_indices(&boxes, cfg.final_nms_iou, true)
        .into_iter()
        .map(|i| pool[i])
        .filter(|d| d.score >= cfg.confidence_threshold)
        .collect()
}
