//! Uniform contract for base detectors run on a full image or a crop.

use std::path::PathBuf;
use std::sync::Arc;

use crate::attention::AttentionTensor;
use crate::error::{Error, Result};
use crate::fusion::CropDetection;
use crate::geometry::BBox;
use crate::scenes::SyntheticScene;

pub mod bridge;
pub mod mock;

pub use bridge::{BridgeClient, DEFAULT_TIMEOUT_SECS};
pub use mock::{synthesize_attention, MockDetector, MockDetectorParams};

/// What image a request refers to.
#[derive(Debug, Clone)]
pub enum ImageRef {
    /// An image (or scene JSON) on disk.
    Path(PathBuf),
    /// An in-memory synthetic scene.
    Scene(Arc<SyntheticScene>),
}

#[derive(Debug, Clone)]
pub struct DetectionRequest {
    pub image: ImageRef,
    /// Region to re-detect, in image pixels. `None` runs on the full image.
    pub crop: Option<BBox>,
    pub want_attention: bool,
}

#[derive(Debug, Clone)]
pub struct DetectionResponse {
    /// Boxes relative to the requested region (see [`crate::fusion::BoxFormat`]).
    pub detections: Vec<CropDetection>,
    pub attention: Option<AttentionTensor>,
    pub latency_ms: f64,
}

/// Capabilities announced by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorInfo {
    pub name: String,
    pub input_size: (u32, u32),
    pub key_grid: (usize, usize),
    pub supports_attention: bool,
    /// Whether `detect` may be called from several threads at once.
    pub concurrent: bool,
}

pub trait Detector: Send + Sync {
    fn info(&self) -> &DetectorInfo;

    fn detect(&self, req: &DetectionRequest) -> Result<DetectionResponse>;
}

pub(crate) fn check_crop(crop: &BBox, width: u32, height: u32) -> Result<()> {
    crop.validate()?;
    if !(crop.width() > 0.0 && crop.height() > 0.0) {
        return Err(Error::Domain(format!("crop {:?} has no area", crop.to_array())));
    }
    if !BBox::image(width, height).contains(crop) {
        return Err(Error::Domain(format!("crop {:?} outside {width}x{height} image", crop.to_array())));
    }
    Ok(())
}
