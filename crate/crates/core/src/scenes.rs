//! Seeded synthetic scenes with ground truth: a few large objects placed uniformly
//! and many small objects packed into Gaussian clusters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Attempts per object before generation gives up.
pub const MAX_REJECTIONS: usize = 1000;

/// Maximum IoU allowed between two ground-truth boxes.
pub const MAX_GT_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: u32,
}

impl SceneObject {
    /// Side length in pixels (objects are square).
    pub fn side_px(&self) -> f64 {
        self.bbox.width().max(self.bbox.height())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    /// Real image backing this scene, for detectors that need pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

impl SyntheticScene {
    pub fn empty(width: u32, height: u32, seed: u64) -> Self {
        SyntheticScene { width, height, seed, objects: Vec::new(), image: None }
    }

    pub fn bounds(&self) -> BBox {
        BBox::image(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Structural(format!("scene size {}x{}", self.width, self.height)));
        }
        let bounds = self.bounds();
        for o in &self.objects {
            o.bbox.validate()?;
            if !bounds.contains(&o.bbox) {
                return Err(Error::Structural(format!(
                    "object {:?} outside {}x{} scene",
                    o.bbox.to_array(),
                    self.width,
                    self.height
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading scene {}", path.display()), e))?;
        let scene: SyntheticScene = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing scene {}", path.display()), e))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(format!("writing scene {}", path.display()), e))
    }
}

/// Distribution parameters for [`generate_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub n_small: usize,
    pub n_large: usize,
    /// Cluster standard deviation as a fraction of the shorter image side, in (0, 1].
    pub cluster_tightness: f64,
    pub n_clusters: usize,
    pub n_classes: u32,
    pub small_side: [f64; 2],
    pub large_side: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 640,
            height: 640,
            n_small: 12,
            n_large: 3,
            cluster_tightness: 0.1,
            n_clusters: 2,
            n_classes: 3,
            small_side: [6.0, 20.0],
            large_side: [48.0, 96.0],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cluster_tightness > 0.0 && self.cluster_tightness <= 1.0) {
            return Err(Error::Config(format!("cluster_tightness={} outside (0,1]", self.cluster_tightness)));
        }
        if self.width == 0 || self.height == 0 || self.n_classes == 0 || self.n_clusters == 0 {
            return Err(Error::Config("width, height, n_classes and n_clusters must be positive".into()));
        }
        for [lo, hi] in [self.small_side, self.large_side] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("bad side range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

fn fits(objects: &[SceneObject], b: &BBox) -> bool {
    objects.iter().all(|o| iou(&o.bbox, b) <= MAX_GT_IOU)
}

fn place<F>(rng: &mut ChaCha8Rng, objects: &[SceneObject], bounds: &BBox, mut propose: F) -> Result<BBox>
where
    F: FnMut(&mut ChaCha8Rng) -> BBox,
{
    for _ in 0..MAX_REJECTIONS {
        let b = propose(rng);
        if bounds.contains(&b) && fits(objects, &b) {
            return Ok(b);
        }
    }
    Err(Error::Generation(format!(
        "no placement after {MAX_REJECTIONS} attempts with {} objects placed",
        objects.len()
    )))
}

fn square(cx: f64, cy: f64, side: f64) -> BBox {
    BBox { x1: cx - side / 2.0, y1: cy - side / 2.0, x2: cx + side / 2.0, y2: cy + side / 2.0 }
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let bounds = BBox::image(spec.width, spec.height);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(spec.n_small + spec.n_large);

    for _ in 0..spec.n_large {
        let side = rng.random_range(spec.large_side[0]..=spec.large_side[1]);
        let bbox = place(&mut rng, &objects, &bounds, |r| {
            let x = r.random_range(0.0..=(w - side).max(0.0));
            let y = r.random_range(0.0..=(h - side).max(0.0));
            BBox { x1: x, y1: y, x2: x + side, y2: y + side }
        })?;
        let class_id = rng.random_range(0..spec.n_classes);
        objects.push(SceneObject { bbox, class_id });
    }

    if spec.n_small > 0 {
        let centers: Vec<(f64, f64)> = (0..spec.n_clusters)
            .map(|_| (rng.random_range(0.15 * w..=0.85 * w), rng.random_range(0.15 * h..=0.85 * h)))
            .collect();
        let spread =
            Normal::new(0.0, spec.cluster_tightness * w.min(h)).map_err(|e| Error::Config(e.to_string()))?;
        for i in 0..spec.n_small {
            let (cx, cy) = centers[i % centers.len()];
            let side = rng.random_range(spec.small_side[0]..=spec.small_side[1]);
            let bbox = place(&mut rng, &objects, &bounds, |r| {
                square(cx + spread.sample(r), cy + spread.sample(r), side)
            })?;
            let class_id = rng.random_range(0..spec.n_classes);
            objects.push(SceneObject { bbox, class_id });
        }
    }

    Ok(SyntheticScene { width: spec.width, height: spec.height, seed, objects, image: None })
}

/// Index file of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Scene files, relative to the manifest's directory unless absolute.
    pub scenes: Vec<PathBuf>,
    pub spec: SceneSpec,
}

/// A scene together with the file it came from.
#[derive(Debug, Clone)]
pub struct SceneEntry {
    pub path: PathBuf,
    pub scene: SyntheticScene,
}

/// Generates one scene per seed into `dir` and writes `dir/manifest.json`.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, seeds: &[u64]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut names = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let scene = generate_scene(spec, seed)?;
        let name = PathBuf::from(format!("scene_{i:05}.json"));
        scene.save(&dir.join(&name))?;
        names.push(name);
    }
    let manifest = DatasetManifest { scenes: names, spec: spec.clone() };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SceneEntry>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(format!("reading dataset {}", manifest_path.display()), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing dataset {}", manifest_path.display()), e))?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .scenes
        .iter()
        .map(|p| {
            let path = if p.is_absolute() { p.clone() } else { root.join(p) };
            let scene = SyntheticScene::load(&path)?;
            Ok(SceneEntry { path, scene })
        })
        .collect()
}
