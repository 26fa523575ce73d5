//! Attention-entropy routing for small-object detection.
//!
//! A base detector's decoder cross-attention is turned into a heatmap and an
//! image-level spatial entropy. Images whose attention is both dispersed and
//! present pass an early-exit gate; sliding windows over the heatmap are scored by
//! mean attention times window entropy, and the top few are cropped, re-detected
//! at full detector resolution, and fused back into the full-image detections.
//!
//! The crate also carries the comparison arms (equal-budget random windows,
//! uniform slicing), a seeded mock detector with synthetic scenes, COCO-style
//! AP evaluation, and the throughput/cost reporting used to check overhead.

pub mod attention;
pub mod baselines;
pub mod bench;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod pipeline;
pub mod routing;
pub mod scenes;

pub use attention::{
    aggregate_attention, build_heatmap, normalize_probability, spatial_attention_entropy, AttentionTensor,
    HeatMap, ProbabilityMap,
};
pub use baselines::{random_selection, uniform_slices, SliceConfig};
pub use bench::{cost_model, routing_report, run_fps_bench, BenchResult, RoutingReport};
pub use detector::{
    BridgeClient, DetectionRequest, DetectionResponse, Detector, DetectorInfo, ImageRef, MockDetector,
    MockDetectorParams,
};
pub use error::{Error, Result};
pub use eval::{evaluate_map, EvalResult};
pub use fusion::{
    back_project, boost_score, fuse_detections, BoxFormat, CropDetection, Detection, FusionConfig, Origin,
};
pub use geometry::{iou, nms, BBox, ScoredBox, CLASS_AGNOSTIC};
pub use pipeline::{ImageTrace, Pipeline, PipelineInput, RouteMode};
pub use routing::{
    evaluate_gate, generate_windows, score_window, select_candidates, window_stats, RoutingConfig,
    ScoringVariant, WindowCandidate,
};
pub use scenes::{generate_scene, SceneSpec, SyntheticScene};
