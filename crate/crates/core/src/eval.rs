//! Average precision at IoU 0.5 with COCO-style area buckets and 101-point interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, rank_order, ScoredBox};
use crate::scenes::SyntheticScene;

pub const MATCH_IOU: f64 = 0.5;
pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_MAX_AREA,
            AreaRange::Medium => (SMALL_MAX_AREA..MEDIUM_MAX_AREA).contains(&area),
            AreaRange::Large => area >= MEDIUM_MAX_AREA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map50: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub per_class: BTreeMap<u32, f64>,
}

/// Outcome of matching one image's detections of one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetOutcome {
    TruePositive {
        gt: usize,
    },
    FalsePositive,
    /// Matched an out-of-range ground truth or itself out of range: excluded from the curve.
    Ignored,
}

/// Greedy matching in rank order.
///
/// Each detection takes the unmatched ground truth with the highest IoU >= 0.5,
/// preferring in-range ground truths (ties: lowest index). Returns one outcome per
/// detection in the order of `dets`, which must already be ranked.
pub fn match_image(
    gts: &[(f64, bool)],
    ious: &[Vec<f64>],
    det_areas: &[f64],
    range: AreaRange,
) -> Vec<DetOutcome> {
    // gts: (area, ignored); ious[d][g]
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(det_areas.len());
    for (d, &area) in det_areas.iter().enumerate() {
        let mut best: Option<usize> = None;
        for pass_ignored in [false, true] {
            let mut best_iou = MATCH_IOU;
            for (g, &(_, ignored)) in gts.iter().enumerate() {
                if ignored != pass_ignored || taken[g] {
                    continue;
                }
                let v = ious[d][g];
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best_iou = v;
                    best = Some(g);
                }
            }
            if best.is_some() {
                break;
            }
        }
        out.push(match best {
            Some(g) => {
                taken[g] = true;
                if gts[g].1 {
                    DetOutcome::Ignored
                } else {
                    DetOutcome::TruePositive { gt: g }
                }
            }
            None if !range.contains(area) => DetOutcome::Ignored,
            None => DetOutcome::FalsePositive,
        });
    }
    out
}

/// 101-point interpolated AP from true-positive flags in score order and the positive count.
pub fn interpolated_ap(ranked_tp: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_pos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / 101.0
}

fn class_ap(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[SyntheticScene],
    class: u32,
    range: AreaRange,
) -> Option<f64> {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new(); // (score, image, rank, tp)
    let mut n_pos = 0;
    for (img, (preds, scene)) in predictions.iter().zip(ground_truth).enumerate() {
        let gts: Vec<(crate::geometry::BBox, f64, bool)> = scene
            .objects
            .iter()
            .filter(|o| o.class_id == class)
            .map(|o| (o.bbox, o.bbox.area(), !range.contains(o.bbox.area())))
            .collect();
        n_pos += gts.iter().filter(|g| !g.2).count();

        let mut dets: Vec<ScoredBox> = preds.iter().filter(|p| p.class_id == class).copied().collect();
        dets.sort_by(rank_order);
        let ious: Vec<Vec<f64>> =
            dets.iter().map(|d| gts.iter().map(|g| iou(&d.bbox, &g.0)).collect()).collect();
        let gt_meta: Vec<(f64, bool)> = gts.iter().map(|g| (g.1, g.2)).collect();
        let areas: Vec<f64> = dets.iter().map(|d| d.bbox.area()).collect();
        for (rank, (d, outcome)) in dets.iter().zip(match_image(&gt_meta, &ious, &areas, range)).enumerate() {
            match outcome {
                DetOutcome::TruePositive { .. } => ranked.push((d.score, img, rank, true)),
                DetOutcome::FalsePositive => ranked.push((d.score, img, rank, false)),
                DetOutcome::Ignored => {}
            }
        }
    }
    if n_pos == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let hits: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    Some(interpolated_ap(&hits, n_pos))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// mAP@50 and area-bucketed AP over the classes that have ground truth in range.
///
/// Buckets without any ground truth report 0.
pub fn evaluate_map(predictions: &[Vec<ScoredBox>], ground_truth: &[SyntheticScene]) -> Result<EvalResult> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Structural(format!(
            "{} prediction lists for {} scenes",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut classes: Vec<u32> =
        ground_truth.iter().flat_map(|s| s.objects.iter().map(|o| o.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();

    let per_range = |range: AreaRange| -> Vec<(u32, f64)> {
        classes
            .iter()
            .filter_map(|&c| class_ap(predictions, ground_truth, c, range).map(|ap| (c, ap)))
            .collect()
    };
    let all = per_range(AreaRange::All);
    Ok(EvalResult {
        map50: mean(all.iter().map(|x| x.1)),
        ap_s: mean(per_range(AreaRange::Small).into_iter().map(|x| x.1)),
        ap_m: mean(per_range(AreaRange::Medium).into_iter().map(|x| x.1)),
        ap_l: mean(per_range(AreaRange::Large).into_iter().map(|x| x.1)),
        per_class: all.into_iter().collect(),
    })
}
