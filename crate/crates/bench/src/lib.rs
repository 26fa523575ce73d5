//! Deterministic inputs shared by the benchmarks.

use attnroute::detector::synthesize_attention;
use attnroute::{
    generate_scene, AttentionTensor, BBox, Detection, MockDetector, MockDetectorParams, SceneSpec, ScoredBox,
    SyntheticScene,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn quiet_mock() -> MockDetector {
    MockDetector::new(MockDetectorParams { simulate_latency: false, ..MockDetectorParams::default() })
        .expect("default mock parameters are valid")
}

/// A scene with clustered small objects at `side x side` pixels.
pub fn scene(side: u32, seed: u64) -> SyntheticScene {
    let spec = SceneSpec { width: side, height: side, ..SceneSpec::default() };
    generate_scene(&spec, seed).expect("default spec generates")
}

/// The mock's attention over `scene(side, seed)`.
pub fn attention(side: u32, seed: u64) -> (SyntheticScene, AttentionTensor) {
    let s = scene(side, seed);
    let t = synthesize_attention(&s, &MockDetectorParams::default());
    (s, t)
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64, side: (f64, f64)) -> BBox {
    let (w, h) = (rng.random_range(side.0..side.1), rng.random_range(side.0..side.1));
    let (x, y) = (rng.random_range(0.0..extent - w), rng.random_range(0.0..extent - h));
    BBox::new(x, y, x + w, y + h).expect("ordered corners")
}

/// `n` scored boxes over a 640 px image, dense enough that NMS has work to do.
pub fn scored_boxes(n: usize, seed: u64) -> Vec<ScoredBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            ScoredBox::new(random_box(&mut rng, 640.0, (8.0, 64.0)), rng.random(), rng.random_range(0..3))
        })
        .collect()
}

/// Full-image and crop detections where many crop boxes duplicate a full-image box.
pub fn fusion_inputs(n: usize, seed: u64) -> (Vec<Detection>, Vec<Detection>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full: Vec<Detection> = scored_boxes(n, seed).into_iter().map(Detection::full).collect();
    let crops = full
        .iter()
        .map(|d| {
            let dx = rng.random_range(-2.0..2.0);
            let b = d.bbox;
            let moved = BBox::new(b.x1 + dx, b.y1, b.x2 + dx, b.y2).unwrap_or(b);
            Detection::crop(ScoredBox::new(moved, rng.random(), d.class_id), rng.random_range(0..5))
        })
        .collect();
    (full, crops)
}

/// Ground truth and noisy predictions for `n` scenes.
pub fn eval_instances(n: usize, seed: u64) -> (Vec<Vec<ScoredBox>>, Vec<SyntheticScene>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<SyntheticScene> = (0..n as u64).map(|i| scene(640, seed + i)).collect();
    let preds = scenes
        .iter()
        .map(|s| {
            let mut p = Vec::new();
            for o in &s.objects {
                if rng.random_bool(0.7) {
                    p.push(ScoredBox::new(o.bbox, rng.random(), o.class_id));
                }
            }
            p.extend(scored_boxes(10, rng.random()));
            p
        })
        .collect();
    (preds, scenes)
}
