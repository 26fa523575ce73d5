//! Seeded stand-in for a transformer detector.
//!
//! An object of side `s` seen at zoom `z` (detector input size over region size) has
//! effective side `s z` and is detected with probability `min(1, (s z / v)^2)` where
//! `v` is the full-visibility side. Low-resolution objects also produce class
//! confusions. Attention is a sum of Gaussian blobs whose width grows as objects
//! shrink, over exponential background noise.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use super::{check_crop, DetectionRequest, DetectionResponse, Detector, DetectorInfo, ImageRef};
use crate::attention::AttentionTensor;
use crate::error::{Error, Result};
use crate::fusion::{to_crop_normalized, BoxFormat, CropDetection};
use crate::geometry::BBox;
use crate::scenes::SyntheticScene;

/// Side of the mock's square attention key grid.
pub const MOCK_KEY_GRID: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockDetectorParams {
    /// Detector input resolution; regions are resized so their long side matches it.
    pub input_size: u32,
    /// Effective object side (pixels at input resolution) where detection saturates.
    pub full_visibility_px: f64,
    pub score_noise_sd: f64,
    /// Emulated cost of one full-image pass.
    pub base_latency_ms: f64,
    /// Emulated crop cost as a fraction of the full-image pass.
    pub crop_cost_ratio: f64,
    pub seed: u64,
    /// Exponential background level of the attention map.
    pub attention_noise: f64,
    /// Blob width constant: `sigma = max(1, spread / side * grid)` keys.
    pub attention_spread: f64,
    /// Localization noise in input-resolution pixels.
    pub box_noise_px: f64,
    /// Chance that an under-resolved object also yields a wrong-class box.
    pub confusion_rate: f64,
    pub n_classes: u32,
    /// Sleep for the emulated latency instead of only reporting it.
    pub simulate_latency: bool,
}

impl Default for MockDetectorParams {
    fn default() -> Self {
        MockDetectorParams {
            input_size: 640,
            full_visibility_px: 24.0,
            score_noise_sd: 0.05,
            base_latency_ms: 20.0,
            crop_cost_ratio: 0.25,
            seed: 0,
            attention_noise: 0.02,
            attention_spread: 3.0,
            box_noise_px: 1.0,
            confusion_rate: 0.5,
            n_classes: 3,
            simulate_latency: true,
        }
    }
}

impl MockDetectorParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("full_visibility_px", self.full_visibility_px),
            ("base_latency_ms", self.base_latency_ms),
            ("attention_spread", self.attention_spread),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name}={v} must be positive")));
        }
        if self.input_size == 0 || self.n_classes == 0 {
            return Err(Error::Config("input_size and n_classes must be positive".into()));
        }
        if !(self.crop_cost_ratio > 0.0 && self.crop_cost_ratio < 1.0) {
            return Err(Error::Config(format!("crop_cost_ratio={} outside (0,1)", self.crop_cost_ratio)));
        }
        if self.score_noise_sd < 0.0 || self.attention_noise < 0.0 || self.box_noise_px < 0.0 {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.confusion_rate) {
            return Err(Error::Config("confusion_rate outside [0,1]".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer folded over `parts`; decorrelates derived seeds.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Sleeps most of the way, then spins, so the emulated latency does not pick up timer slack.
fn wait_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_millis(1);
    let now = Instant::now();
    if deadline > now + SPIN {
        std::thread::sleep(deadline - now - SPIN);
    }
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
}

/// Detection probability for an object whose side is `effective_px` at input resolution.
pub fn detection_probability(effective_px: f64, full_visibility_px: f64) -> f64 {
    (effective_px / full_visibility_px).powi(2).min(1.0)
}

/// Mock attention over the full scene: one 20x20 key grid, single layer/head/query.
pub fn synthesize_attention(scene: &SyntheticScene, params: &MockDetectorParams) -> AttentionTensor {
    let g = MOCK_KEY_GRID;
    let (w, h) = (scene.width as f64, scene.height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[params.seed, scene.seed, 0xA77E]));
    let mut values = vec![0.0f64; g * g];
    for v in values.iter_mut() {
        let e: f64 = Exp1.sample(&mut rng);
        *v = params.attention_noise * e;
    }
    for o in &scene.objects {
        let (cx, cy) = o.bbox.center();
        let kx = cx / w * g as f64 - 0.5;
        let ky = cy / h * g as f64 - 0.5;
        let sigma = (params.attention_spread / o.side_px().max(1e-6) * g as f64).max(1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in 0..g {
            for c in 0..g {
                let d2 = (c as f64 - kx).powi(2) + (r as f64 - ky).powi(2);
                values[r * g + c] += (-d2 * inv).exp();
            }
        }
    }
    AttentionTensor::new(1, 1, 1, (g, g), values.into_iter().map(|v| v as f32).collect())
        .expect("mock attention is well-formed")
}

pub struct MockDetector {
    params: MockDetectorParams,
    info: DetectorInfo,
}

impl MockDetector {
    pub fn new(params: MockDetectorParams) -> Result<Self> {
        params.validate()?;
        let info = DetectorInfo {
            name: "mock".into(),
            input_size: (params.input_size, params.input_size),
            key_grid: (MOCK_KEY_GRID, MOCK_KEY_GRID),
            supports_attention: true,
            concurrent: true,
        };
        Ok(MockDetector { params, info })
    }

    pub fn params(&self) -> &MockDetectorParams {
        &self.params
    }

    /// Emulated latency of one call.
    pub fn nominal_latency_ms(&self, is_crop: bool) -> f64 {
        if is_crop {
            self.params.base_latency_ms * self.params.crop_cost_ratio
        } else {
            self.params.base_latency_ms
        }
    }

    fn resolve(&self, image: &ImageRef) -> Result<Arc<SyntheticScene>> {
        match image {
            ImageRef::Scene(s) => Ok(Arc::clone(s)),
            ImageRef::Path(p) => Ok(Arc::new(SyntheticScene::load(p)?)),
        }
    }

    fn detections(&self, scene: &SyntheticScene, region: &BBox, is_crop: bool) -> Vec<CropDetection> {
        let p = &self.params;
        let zoom = p.input_size as f64 / region.width().max(region.height());
        let seed = mix_seed(&[
            p.seed,
            scene.seed,
            region.x1.to_bits(),
            region.y1.to_bits(),
            region.x2.to_bits(),
            region.y2.to_bits(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let score_noise = Normal::new(0.0, p.score_noise_sd).expect("validated sd");
        let jitter = Normal::new(0.0, p.box_noise_px / zoom).expect("validated sd");

        let mut out = Vec::new();
        let emit = |b: BBox, score: f64, class_id: u32, out: &mut Vec<CropDetection>| {
            let b = b.clip_to(region);
            if b.area() <= 0.0 {
                return;
            }
            let (coords, box_format) = if is_crop {
                let n = to_crop_normalized(&b, region);
                (n.map(|v| v.clamp(0.0, 1.0)), BoxFormat::CxcywhNorm)
            } else {
                ([b.x1 - region.x1, b.y1 - region.y1, b.x2 - region.x1, b.y2 - region.y1], BoxFormat::XyxyAbs)
            };
            out.push(CropDetection {
                coords,
                box_format,
                score: score.clamp(0.0, 1.0),
                class_id,
                source_window: None,
            });
        };

        for o in &scene.objects {
            // Draw every variate even for skipped objects so each object keeps its own stream.
            let (u, conf_u, noise, conf_score) = (
                rng.random::<f64>(),
                rng.random::<f64>(),
                score_noise.sample(&mut rng),
                rng.random_range(0.1..0.45),
            );
            let offsets: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
            let conf_class = rng.random_range(1..p.n_classes.max(2));
            if !region.contains(&o.bbox) {
                continue;
            }
            let prob = detection_probability(o.side_px() * zoom, p.full_visibility_px);
            let b = &o.bbox;
            let jittered = BBox {
                x1: b.x1 + offsets[0],
                y1: b.y1 + offsets[1],
                x2: (b.x2 + offsets[2]).max(b.x1 + offsets[0]),
                y2: (b.y2 + offsets[3]).max(b.y1 + offsets[1]),
            };
            if u < prob {
                emit(jittered, prob + noise, o.class_id, &mut out);
            }
            if p.n_classes > 1 && conf_u < p.confusion_rate * (1.0 - prob) {
                let wrong = (o.class_id + conf_class) % p.n_classes;
                emit(jittered, conf_score, wrong, &mut out);
            }
        }
        out
    }
}

impl Detector for MockDetector {
    fn info(&self) -> &DetectorInfo {
        &self.info
    }

    fn detect(&self, req: &DetectionRequest) -> Result<DetectionResponse> {
        let start = Instant::now();
        let scene = self.resolve(&req.image)?;
        if let Some(c) = &req.crop {
            check_crop(c, scene.width, scene.height)?;
        }
        let region = req.crop.unwrap_or_else(|| scene.bounds());
        let detections = self.detections(&scene, &region, req.crop.is_some());
        let attention = req.want_attention.then(|| synthesize_attention(&scene, &self.params));

        let nominal = self.nominal_latency_ms(req.crop.is_some());
        let latency_ms = if self.params.simulate_latency {
            wait_until(start + Duration::from_secs_f64(nominal / 1000.0));
            start.elapsed().as_secs_f64() * 1000.0
        } else {
            nominal
        };
        Ok(DetectionResponse { detections, attention, latency_ms })
    }
}
