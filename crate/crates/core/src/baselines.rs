//! Comparison arms: equal-budget random window selection and uniform slicing.
//!
//! Uniform slicing only covers the fixed-grid family of sliced inference; adaptive
//! tiling schemes are approximated by choosing `tile_fraction` and `overlap_fraction`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::HeatMap;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::routing::{axis_positions, fraction_of, score_all_windows, RoutingConfig, WindowCandidate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceConfig {
    /// Tile size relative to the image, in (0, 1].
    pub tile_fraction: f64,
    /// Overlap between neighbouring tiles relative to the tile size, in [0, 1).
    pub overlap_fraction: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig { tile_fraction: 0.5, overlap_fraction: 0.2 }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tile_fraction > 0.0 && self.tile_fraction <= 1.0) {
            return Err(Error::Config(format!("tile_fraction={} outside (0,1]", self.tile_fraction)));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!("overlap_fraction={} outside [0,1)", self.overlap_fraction)));
        }
        Ok(())
    }
}

/// Draws `cfg.top_k` windows uniformly without replacement from the routing grid.
///
/// Candidates keep their heatmap statistics for reporting; their scores play no
/// part in the draw. Output is ordered by grid position.
pub fn random_selection(hm: &HeatMap, cfg: &RoutingConfig, seed: u64) -> Result<Vec<WindowCandidate>> {
    let grid = score_all_windows(hm, cfg)?;
    if cfg.top_k >= grid.len() {
        return Ok(grid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, grid.len(), cfg.top_k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| grid[i]).collect())
}

/// Regular overlapping tiles covering the whole image, border tiles flush with the edge.
pub fn uniform_slices(width: u32, height: u32, cfg: &SliceConfig) -> Vec<BBox> {
    let (tw, th) =
        (fraction_of(width, cfg.tile_fraction).max(1), fraction_of(height, cfg.tile_fraction).max(1));
    let step = |t: u32| fraction_of(t, 1.0 - cfg.overlap_fraction).max(1);
    let xs = axis_positions(width, tw, step(tw));
    let ys = axis_positions(height, th, step(th));
    ys.iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| BBox {
                x1: x as f64,
                y1: y as f64,
                x2: (x + tw) as f64,
                y2: (y + th) as f64,
            })
        })
        .collect()
}
