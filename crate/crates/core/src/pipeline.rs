//! Per-image route / refine / fuse pipeline.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{build_heatmap_in, HeatMap};
use crate::baselines::{random_selection, uniform_slices, SliceConfig};
use crate::detector::mock::mix_seed;
use crate::detector::{DetectionRequest, DetectionResponse, Detector, ImageRef};
use crate::error::{Error, Result};
use crate::fusion::{back_project, boost_score, fuse_detections, Detection, FusionConfig};
use crate::geometry::BBox;
use crate::routing::{evaluate_gate, select_candidates, RoutingConfig, WindowCandidate};
use crate::scenes::SyntheticScene;

/// Which windows get re-detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    /// Gate, then the top-K ambiguity-saliency windows.
    Entropy,
    /// As many windows as the entropy arm would pick, drawn uniformly from the same grid.
    Random,
    /// Every tile of a uniform slicing grid.
    Slices,
    /// Base detector only.
    None,
}

impl std::str::FromStr for RouteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(RouteMode::Entropy),
            "random" => Ok(RouteMode::Random),
            "slices" => Ok(RouteMode::Slices),
            "none" => Ok(RouteMode::None),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for RouteMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RouteMode::Entropy => "entropy",
            RouteMode::Random => "random",
            RouteMode::Slices => "slices",
            RouteMode::None => "none",
        })
    }
}

/// One re-detected region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropRecord {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub scale: f64,
    /// Heatmap statistics; absent for slicing tiles.
    pub m: Option<f64>,
    pub h_s: Option<f64>,
    pub sigma: Option<f64>,
    pub latency_ms: f64,
}

/// Everything that happened to one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageTrace {
    pub index: usize,
    /// Gate verdict; `None` in modes that do not consult the gate.
    pub gate: Option<bool>,
    pub sae_global: Option<f64>,
    pub mean_h: Option<f64>,
    pub degenerate_heatmap: bool,
    pub base_latency_ms: f64,
    pub crops: Vec<CropRecord>,
    /// End-to-end wall-clock time of the whole pipeline for this image.
    pub wall_ms: f64,
    pub detections: Vec<Detection>,
    #[serde(skip)]
    pub heatmap: Option<HeatMap>,
}

impl ImageTrace {
    pub fn k_prime(&self) -> usize {
        self.crops.len()
    }

    pub fn crop_latency_ms(&self) -> f64 {
        self.crops.iter().map(|c| c.latency_ms).sum()
    }
}

/// An image to process: the scene (size and, for the mock, content) and an optional file.
#[derive(Debug, Clone)]
pub struct PipelineInput {
    pub scene: Arc<SyntheticScene>,
    /// Path handed to detectors that need pixels.
    pub path: Option<PathBuf>,
}

impl PipelineInput {
    pub fn in_memory(scene: SyntheticScene) -> Self {
        PipelineInput { scene: Arc::new(scene), path: None }
    }

    fn image_ref(&self) -> ImageRef {
        match (&self.scene.image, &self.path) {
            (Some(img), _) => ImageRef::Path(img.clone()),
            (None, Some(p)) => ImageRef::Path(p.clone()),
            (None, None) => ImageRef::Scene(Arc::clone(&self.scene)),
        }
    }
}

pub struct Pipeline<'d> {
    pub detector: &'d dyn Detector,
    pub routing: RoutingConfig,
    pub fusion: FusionConfig,
    pub slicing: SliceConfig,
    pub mode: RouteMode,
    pub seed: u64,
    /// Crop detections in flight at once; honoured only by concurrent-safe detectors.
    pub max_in_flight: usize,
    /// Return each image's heatmap in its trace. Otherwise the buffer is reused.
    pub keep_heatmaps: bool,
    scratch: Mutex<Vec<f64>>,
}

struct Selection {
    gate: Option<bool>,
    heatmap: Option<HeatMap>,
    crops: Vec<(BBox, f64, Option<WindowCandidate>)>,
}

impl<'d> Pipeline<'d> {
    pub fn new(detector: &'d dyn Detector, mode: RouteMode) -> Self {
        Pipeline {
            detector,
            routing: RoutingConfig::default(),
            fusion: FusionConfig::default(),
            slicing: SliceConfig::default(),
            mode,
            seed: 0,
            max_in_flight: 1,
            keep_heatmaps: false,
            scratch: Mutex::new(Vec::new()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.routing.validate()?;
        self.fusion.validate()?;
        self.slicing.validate()
    }

    fn select(&self, input: &PipelineInput, base: &DetectionResponse, index: usize) -> Result<Selection> {
        let (w, h) = (input.scene.width, input.scene.height);
        match self.mode {
            RouteMode::None => Ok(Selection { gate: None, heatmap: None, crops: Vec::new() }),
            RouteMode::Slices => Ok(Selection {
                gate: None,
                heatmap: None,
                crops: uniform_slices(w, h, &self.slicing)
                    .into_iter()
                    .map(|b| (b, self.slicing.tile_fraction, None))
                    .collect(),
            }),
            RouteMode::Entropy | RouteMode::Random => {
                let attention = base
                    .attention
                    .as_ref()
                    .ok_or_else(|| Error::Backend("base detection returned no attention".into()))?;
                let buf = std::mem::take(&mut *self.scratch.lock().unwrap_or_else(|e| e.into_inner()));
                let hm = build_heatmap_in(attention, w as usize, h as usize, buf)?;
                let gate = evaluate_gate(&hm, &self.routing);
                let mut chosen = if gate { select_candidates(&hm, &self.routing)? } else { Vec::new() };
                if self.mode == RouteMode::Random && !chosen.is_empty() {
                    let budget = RoutingConfig { top_k: chosen.len(), ..self.routing.clone() };
                    chosen = random_selection(&hm, &budget, mix_seed(&[self.seed, index as u64]))?;
                }
                Ok(Selection {
                    gate: Some(gate),
                    crops: chosen.into_iter().map(|c| (c.bbox, c.scale, Some(c))).collect(),
                    heatmap: Some(hm),
                })
            }
        }
    }

    fn run_crops(&self, image: &ImageRef, regions: &[BBox]) -> Result<Vec<DetectionResponse>> {
        let call = |b: &BBox| {
            self.detector.detect(&DetectionRequest {
                image: image.clone(),
                crop: Some(*b),
                want_attention: false,
            })
        };
        let lanes = self.max_in_flight.max(1);
        if lanes == 1 || !self.detector.info().concurrent || regions.len() < 2 {
            return regions.iter().map(call).collect();
        }
        let mut out = Vec::with_capacity(regions.len());
        for chunk in regions.chunks(lanes) {
            let results: Vec<Result<DetectionResponse>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|b| s.spawn(move || call(b))).collect();
                handles.into_iter().map(|h| h.join().expect("crop worker panicked")).collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }

    /// Runs the full pipeline on one image. All crop detections have completed on return.
    pub fn process(&self, index: usize, input: &PipelineInput) -> Result<ImageTrace> {
        let start = Instant::now();
        let image = input.image_ref();
        let bounds = input.scene.bounds();
        let want_attention = matches!(self.mode, RouteMode::Entropy | RouteMode::Random);

        let base =
            self.detector.detect(&DetectionRequest { image: image.clone(), crop: None, want_attention })?;
        let originals = base
            .detections
            .iter()
            .map(|d| back_project(d, &bounds, &bounds).map(Detection::full))
            .collect::<Result<Vec<_>>>()?;

        let selection = self.select(input, &base, index)?;
        let regions: Vec<BBox> = selection.crops.iter().map(|c| c.0).collect();
        let responses = self.run_crops(&image, &regions)?;

        let boost = self.fusion.boost_enabled && self.mode != RouteMode::Slices;
        let mut refined = Vec::new();
        let mut crops = Vec::with_capacity(responses.len());
        for (j, ((region, scale, cand), resp)) in selection.crops.iter().zip(&responses).enumerate() {
            for d in &resp.detections {
                let mut sb = back_project(d, region, &bounds)?;
                if let (true, Some(c)) = (boost, cand) {
                    sb.score = boost_score(sb.score, c.h_s, true);
                }
                refined.push(Detection::crop(sb, j));
            }
            crops.push(CropRecord {
                bbox: *region,
                scale: *scale,
                m: cand.map(|c| c.m),
                h_s: cand.map(|c| c.h_s),
                sigma: cand.map(|c| c.sigma),
                latency_ms: resp.latency_ms,
            });
        }
        let detections = fuse_detections(&originals, &refined, &self.fusion);

        let mut hm = selection.heatmap;
        let sae_global = hm.as_ref().map(HeatMap::sae_global);
        let mean_h = hm.as_ref().map(HeatMap::mean);
        let degenerate_heatmap = hm.as_ref().is_some_and(HeatMap::is_degenerate);
        if !self.keep_heatmaps {
            if let Some(done) = hm.take() {
                *self.scratch.lock().unwrap_or_else(|e| e.into_inner()) = done.into_data();
            }
        }
        Ok(ImageTrace {
            index,
            gate: selection.gate,
            sae_global,
            mean_h,
            degenerate_heatmap,
            base_latency_ms: base.latency_ms,
            crops,
            wall_ms: start.elapsed().as_secs_f64() * 1000.0,
            detections,
            heatmap: hm,
        })
    }

    pub fn run(&self, inputs: &[PipelineInput]) -> Result<Vec<ImageTrace>> {
        self.validate()?;
        inputs.iter().enumerate().map(|(i, inp)| self.process(i, inp)).collect()
    }
}
