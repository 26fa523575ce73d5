//! Run manifests: what to route, with which detector, and where to write results.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use attnroute::scenes::{load_dataset, SceneEntry};
use attnroute::{
    BridgeClient, Detector, FusionConfig, MockDetector, MockDetectorParams, PipelineInput, RoutingConfig,
    SliceConfig,
};
use serde::{Deserialize, Serialize};

use crate::Usage;

fn default_timeout() -> u64 {
    attnroute::detector::DEFAULT_TIMEOUT_SECS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorSpec {
    Mock(MockDetectorParams),
    Bridge(BridgeSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub slicing: SliceConfig,
    pub detector: DetectorSpec,
    /// Dataset manifest written by `synth`.
    pub dataset: PathBuf,
    /// Run seed. Also replaces the mock detector's own seed.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunManifest {
    /// Reads a manifest; relative paths inside it are taken from the manifest's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Usage(format!("invalid manifest {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut m.dataset, &mut m.output_dir] {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        Ok(m)
    }

    /// Applies command-line overrides and pushes the run seed into the detector.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        if let DetectorSpec::Mock(p) = &mut self.detector {
            p.seed = self.seed;
            p.validate().map_err(|e| Usage(e.to_string()))?;
        }
        self.routing.validate().map_err(|e| Usage(e.to_string()))?;
        self.fusion.validate().map_err(|e| Usage(e.to_string()))?;
        self.slicing.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(self)
    }

    /// Creates the output directory and records the resolved manifest in it.
    pub fn write_copy(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating {}", self.output_dir.display()))?;
        write_json(&self.output_dir.join("manifest.json"), self)
    }

    pub fn open_detector(&self) -> anyhow::Result<Box<dyn Detector>> {
        Ok(match &self.detector {
            DetectorSpec::Mock(p) => Box::new(MockDetector::new(p.clone())?),
            DetectorSpec::Bridge(b) => {
                Box::new(BridgeClient::spawn(&b.command, &b.args, Duration::from_secs(b.timeout_secs))?)
            }
        })
    }

    pub fn load_scenes(&self) -> anyhow::Result<Vec<SceneEntry>> {
        Ok(load_dataset(&self.dataset)?)
    }

    /// Pipeline inputs for the dataset. A subprocess detector is pointed at the scene files,
    /// the in-process mock keeps scenes in memory.
    pub fn inputs(&self, entries: &[SceneEntry]) -> Vec<PipelineInput> {
        entries
            .iter()
            .map(|e| PipelineInput {
                scene: Arc::new(e.scene.clone()),
                path: matches!(self.detector, DetectorSpec::Bridge(_)).then(|| e.path.clone()),
            })
            .collect()
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
