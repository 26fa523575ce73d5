//! Brute-force reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's algorithms; only plain data types are shared.
#![allow(dead_code)]

use attnroute::eval::AreaRange;
use attnroute::scenes::SceneObject;
use attnroute::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64, side: (f64, f64)) -> BBox {
    let w = rng.random_range(side.0..side.1);
    let h = rng.random_range(side.0..side.1);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Offsets along one axis, written from the rule: step by `stride` while the window
/// fits, then add the flush offset if the border was not reached exactly.
pub fn offsets(extent: u32, size: u32, stride: u32) -> Vec<u32> {
    let mut v = Vec::new();
    let mut p = 0;
    while p + size <= extent {
        v.push(p);
        p += stride;
    }
    if *v.last().unwrap() + size != extent {
        v.push(extent - size);
    }
    v
}

pub fn brute_stats(data: &[f64], width: usize, b: [u32; 4]) -> (f64, f64) {
    let mut vals = Vec::new();
    for y in b[1]..b[3] {
        for x in b[0]..b[2] {
            vals.push(data[y as usize * width + x as usize]);
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let z: f64 = vals.iter().map(|v| v + 1e-8).sum();
    let ent: f64 = vals
        .iter()
        .map(|v| {
            let p = (v + 1e-8) / z;
            -p * p.ln()
        })
        .sum();
    (mean, (ent / n.ln()).clamp(0.0, 1.0))
}

/// Enumerate, score, filter, sort, suppress and truncate with nothing shared with the library.
pub fn brute_select(data: &[f64], w: u32, h: u32, cfg: &RoutingConfig) -> Vec<[u32; 4]> {
    let mut all: Vec<([u32; 4], f64, f64, f64)> = Vec::new();
    for s in [0.25, 0.5, 0.75] {
        let (ww, wh) = ((s * w as f64) as u32, (s * h as f64) as u32);
        if ww < 64 || wh < 64 {
            continue;
        }
        for y in offsets(h, wh, wh / 2) {
            for x in offsets(w, ww, ww / 2) {
                let b = [x, y, x + ww, y + wh];
                let (m, hs) = brute_stats(data, w as usize, b);
                all.push((b, m, hs, m * hs));
            }
        }
    }
    let mut idx: Vec<usize> =
        (0..all.len()).filter(|&i| all[i].1 >= cfg.mu && all[i].2 >= cfg.tau_w).collect();
    idx.sort_by(|&a, &b| all[b].3.partial_cmp(&all[a].3).unwrap().then(a.cmp(&b)));
    let f = |b: [u32; 4]| b.map(f64::from);
    let mut chosen: Vec<[u32; 4]> = Vec::new();
    for i in idx {
        if chosen.len() == cfg.top_k {
            break;
        }
        if chosen.iter().all(|c| overlap(f(*c), f(all[i].0)) <= 0.5) {
            chosen.push(all[i].0);
        }
    }
    chosen
}

pub fn smooth_random_map(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..6))
        .map(|_| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                rng.random_range(8.0..80.0),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let mut data: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            let bump: f64 = blobs
                .iter()
                .map(|&(cx, cy, s, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            bump + 0.05 * rng.random::<f64>()
        })
        .collect();
    let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    for v in &mut data {
        *v = (*v - lo) / (hi - lo);
    }
    data
}

pub fn as_pixels(c: &[WindowCandidate]) -> Vec<[u32; 4]> {
    c.iter().map(|c| c.bbox.to_array().map(|v| v as u32)).collect()
}

pub struct Instance {
    pub scene: SyntheticScene,
    pub preds: Vec<ScoredBox>,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let mut scene = SyntheticScene::empty(300, 300, 0);
    let n_gt = rng.random_range(1..=5);
    for _ in 0..n_gt {
        scene.objects.push(SceneObject {
            bbox: random_box(rng, 300.0, (5.0, 130.0)),
            class_id: rng.random_range(0..2),
        });
    }
    let n_pred = rng.random_range(0..=8);
    let preds = (0..n_pred)
        .map(|_| {
            let class_id = rng.random_range(0..2);
            let bbox = if rng.random_bool(0.6) {
                // Perturb a ground truth so matches actually happen.
                let g = scene.objects[rng.random_range(0..scene.objects.len())].bbox;
                let d = 0.15 * g.width().min(g.height());
                let mut j = || rng.random_range(-d..=d);
                let b = [g.x1 + j(), g.y1 + j(), g.x2 + j(), g.y2 + j()];
                BBox::new(b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]) + 0.5, b[1].max(b[3]) + 0.5).unwrap()
            } else {
                random_box(rng, 300.0, (5.0, 130.0))
            };
            ScoredBox::new(bbox, rng.random::<f64>(), class_id)
        })
        .collect();
    Instance { scene, preds }
}

pub fn bucket(range: AreaRange, area: f64) -> bool {
    match range {
        AreaRange::All => true,
        AreaRange::Small => area < 1024.0,
        AreaRange::Medium => (1024.0..9216.0).contains(&area),
        AreaRange::Large => area >= 9216.0,
    }
}

/// Per-detection outcome: Some(true) tp, Some(false) fp, None ignored.
/// Detections are visited by descending score; each tries unmatched in-range
/// ground truths first, then out-of-range ones, taking the highest IoU (first index on ties).
pub fn brute_match(gt: &[BBox], dets: &[BBox], range: AreaRange) -> Vec<Option<bool>> {
    let mut used = vec![false; gt.len()];
    dets.iter()
        .map(|d| {
            let pick = |want_in: bool, used: &[bool]| {
                let mut best: Option<(usize, f64)> = None;
                for (g, gb) in gt.iter().enumerate() {
                    if used[g] || bucket(range, gb.area()) != want_in {
                        continue;
                    }
                    let v = overlap(d.to_array(), gb.to_array());
                    if v >= 0.5 && best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                best.map(|b| b.0)
            };
            match pick(true, &used).or_else(|| pick(false, &used)) {
                Some(g) => {
                    used[g] = true;
                    bucket(range, gt[g].area()).then_some(true)
                }
                None => bucket(range, d.area()).then_some(false),
            }
        })
        .collect()
}

/// 101-point AP as the mean, over recall thresholds, of the best precision at or beyond the threshold.
pub fn brute_ap(hits: &[bool], n_pos: usize) -> f64 {
    let mut pts = Vec::new();
    let (mut tp, mut seen) = (0, 0);
    for &h in hits {
        seen += 1;
        tp += usize::from(h);
        pts.push((tp as f64 / n_pos as f64, tp as f64 / seen as f64));
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

pub fn brute_eval(inst: &[Instance]) -> [f64; 4] {
    let ranges = [AreaRange::All, AreaRange::Small, AreaRange::Medium, AreaRange::Large];
    ranges.map(|range| {
        let mut aps = Vec::new();
        for class in 0..2u32 {
            let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
            let mut n_pos = 0;
            for (i, x) in inst.iter().enumerate() {
                let gt: Vec<BBox> =
                    x.scene.objects.iter().filter(|o| o.class_id == class).map(|o| o.bbox).collect();
                n_pos += gt.iter().filter(|g| bucket(range, g.area())).count();
                let mut dets: Vec<&ScoredBox> = x.preds.iter().filter(|p| p.class_id == class).collect();
                dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
                for (r, (d, o)) in dets.iter().zip(brute_match(&gt, &boxes, range)).enumerate() {
                    if let Some(tp) = o {
                        ranked.push((d.score, i, r, tp));
                    }
                }
            }
            if n_pos > 0 {
                ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
                aps.push(brute_ap(&ranked.iter().map(|r| r.3).collect::<Vec<_>>(), n_pos));
            }
        }
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    })
}

pub fn library_eval(inst: &[Instance]) -> EvalResult {
    let preds: Vec<Vec<ScoredBox>> = inst.iter().map(|x| x.preds.clone()).collect();
    let gt: Vec<SyntheticScene> = inst.iter().map(|x| x.scene.clone()).collect();
    evaluate_map(&preds, &gt).unwrap()
}
