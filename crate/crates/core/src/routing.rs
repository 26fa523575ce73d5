//! Early-exit gate, sliding-window generation, window statistics and top-K selection.

use serde::{Deserialize, Serialize};

use crate::attention::{HeatMap, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// How a window's mean attention `m` and entropy `h` combine into its routing score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringVariant {
    /// `m * h`
    Product,
    /// `m`
    MeanOnly,
    /// `h`
    EntropyOnly,
    /// `m^gamma * h`
    GammaSharpened,
    /// `sigmoid(k (m - mu)) * h`
    SoftGated,
}

impl std::str::FromStr for ScoringVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown scoring variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    /// Image-level entropy threshold of the gate.
    pub tau_g: f64,
    /// Window-level entropy threshold.
    pub tau_w: f64,
    /// Attention-intensity threshold (gate mean and window mean).
    pub mu: f64,
    /// Relative window scales, each in (0, 1).
    pub scales: Vec<f64>,
    /// Stride as a fraction of the window size.
    pub stride_fraction: f64,
    pub min_window_px: u32,
    pub top_k: usize,
    pub window_nms_iou: f64,
    pub scoring_variant: ScoringVariant,
    pub gamma: f64,
    pub soft_k: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            tau_g: 0.7,
            tau_w: 0.7,
            mu: 0.3,
            scales: vec![0.25, 0.5, 0.75],
            stride_fraction: 0.5,
            min_window_px: 64,
            top_k: 5,
            window_nms_iou: 0.5,
            scoring_variant: ScoringVariant::Product,
            gamma: 1.0,
            soft_k: 10.0,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}={v} outside [0,1]")))
            }
        };
        unit("tau_g", self.tau_g)?;
        unit("tau_w", self.tau_w)?;
        unit("mu", self.mu)?;
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Config(format!("scale {s} outside (0,1)")));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(Error::Config(format!("stride_fraction={} outside (0,1]", self.stride_fraction)));
        }
        if !(self.window_nms_iou > 0.0 && self.window_nms_iou <= 1.0) {
            return Err(Error::Config(format!("window_nms_iou={} outside (0,1]", self.window_nms_iou)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) || !self.soft_k.is_finite() {
            return Err(Error::Config("gamma must be > 0 and soft_k finite".into()));
        }
        Ok(())
    }
}

/// A grid window before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub scale: f64,
}

/// A scored sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowCandidate {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub scale: f64,
    /// Mean heatmap value inside the window.
    pub m: f64,
    /// Normalized entropy of the window's heatmap values.
    pub h_s: f64,
    pub sigma: f64,
    /// Position of the window in [`generate_windows`] emission order.
    pub grid_index: usize,
}

/// Proceed with refinement only for dispersed (`sae >= tau_g`) yet evidenced (`mean >= mu`) maps.
pub fn evaluate_gate(hm: &HeatMap, cfg: &RoutingConfig) -> bool {
    hm.sae_global() >= cfg.tau_g && hm.mean() >= cfg.mu
}

/// `floor(fraction * extent)` tolerant of representation error like `0.29 * 100`.
pub(crate) fn fraction_of(extent: u32, fraction: f64) -> u32 {
    (fraction * extent as f64 + 1e-9).floor() as u32
}

/// Start offsets along one axis, stepping by `stride` and appending a flush offset
/// `extent - size` when the last step falls short of the border.
pub(crate) fn axis_positions(extent: u32, size: u32, stride: u32) -> Vec<u32> {
    if size == 0 || size > extent {
        return Vec::new();
    }
    let stride = stride.max(1);
    let mut out: Vec<u32> = (0..).map(|k| k * stride).take_while(|p| p + size <= extent).collect();
    let flush = extent - size;
    if out.last() != Some(&flush) {
        out.push(flush);
    }
    out
}

/// Windows of every retained scale, ordered by (scale, y, x) ascending.
pub fn generate_windows(width: u32, height: u32, cfg: &RoutingConfig) -> Vec<Window> {
    let mut scales = cfg.scales.clone();
    scales.sort_by(f64::total_cmp);
    scales.dedup();

    let mut out = Vec::new();
    for s in scales {
        let (ww, wh) = (fraction_of(width, s), fraction_of(height, s));
        if ww < cfg.min_window_px || wh < cfg.min_window_px || ww == 0 || wh == 0 {
            continue;
        }
        let xs = axis_positions(width, ww, fraction_of(ww, cfg.stride_fraction));
        let ys = axis_positions(height, wh, fraction_of(wh, cfg.stride_fraction));
        for &y in &ys {
            for &x in &xs {
                out.push(Window {
                    bbox: BBox { x1: x as f64, y1: y as f64, x2: (x + ww) as f64, y2: (y + wh) as f64 },
                    scale: s,
                });
            }
        }
    }
    out
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)` covered by `b`, checked against the map.
fn pixel_rect(hm: &HeatMap, b: &BBox) -> Result<(usize, usize, usize, usize)> {
    b.validate()?;
    let (x0, y0) = (b.x1.floor(), b.y1.floor());
    let (x1, y1) = (b.x2.ceil(), b.y2.ceil());
    if x0 < 0.0 || y0 < 0.0 || x1 > hm.width() as f64 || y1 > hm.height() as f64 {
        return Err(Error::Domain(format!(
            "window {:?} outside {}x{} heatmap",
            b.to_array(),
            hm.width(),
            hm.height()
        )));
    }
    let r = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
    if (r.2 - r.0) * (r.3 - r.1) < 2 {
        return Err(Error::Domain(format!("window {:?} covers fewer than 2 pixels", b.to_array())));
    }
    Ok(r)
}

/// Mean and normalized entropy of the heatmap pixels under `b`.
pub fn window_stats(hm: &HeatMap, b: &BBox) -> Result<(f64, f64)> {
    let (x0, y0, x1, y1) = pixel_rect(hm, b)?;
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    let mut sum = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            sum += hm.get(x, y);
        }
    }
    let total = sum + n * DEFAULT_EPSILON;
    let mut h = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = (hm.get(x, y) + DEFAULT_EPSILON) / total;
            h -= p * p.ln();
        }
    }
    Ok((sum / n, (h / n.ln()).clamp(0.0, 1.0)))
}

/// Window statistics in constant time per window from block sums on a lattice.
///
/// The lattice is cut at every window edge, so each window is a union of whole
/// blocks. Uses `H = ln S - (1/S) sum (v+e) ln(v+e)` with `S = sum (v+e)`; the
/// per-pixel term is offset by `e ln e` so all-zero regions accumulate exact zeros.
pub struct WindowStatsTable {
    xs: Vec<usize>,
    ys: Vec<usize>,
    sum: Vec<f64>,
    xlogx: Vec<f64>,
}

fn lattice(edges: impl Iterator<Item = usize>, extent: usize) -> Vec<usize> {
    let mut v: Vec<usize> = edges.chain([0, extent]).filter(|&e| e <= extent).collect();
    v.sort_unstable();
    v.dedup();
    v
}

impl WindowStatsTable {
    /// Lattice covering the integer-aligned edges of `windows`.
    pub fn new(hm: &HeatMap, windows: &[BBox]) -> Self {
        let (w, h) = (hm.width(), hm.height());
        let edge = |v: f64| v as usize;
        let xs = lattice(windows.iter().flat_map(|b| [edge(b.x1), edge(b.x2)]), w);
        let ys = lattice(windows.iter().flat_map(|b| [edge(b.y1), edge(b.y2)]), h);
        let (bx, by) = (xs.len() - 1, ys.len() - 1);

        let eps = DEFAULT_EPSILON;
        let base = eps * eps.ln();
        let mut block_sum = vec![0.0; bx * by];
        let mut block_xlogx = vec![0.0; bx * by];
        for j in 0..by {
            let (s_row, x_row) =
                (&mut block_sum[j * bx..(j + 1) * bx], &mut block_xlogx[j * bx..(j + 1) * bx]);
            for y in ys[j]..ys[j + 1] {
                let line = &hm.data()[y * w..(y + 1) * w];
                for i in 0..bx {
                    let (mut rs, mut rx) = (0.0, 0.0);
                    for &v in &line[xs[i]..xs[i + 1]] {
                        rs += v;
                        rx += (v + eps) * (v + eps).ln() - base;
                    }
                    s_row[i] += rs;
                    x_row[i] += rx;
                }
            }
        }

        let stride = bx + 1;
        let mut sum = vec![0.0; stride * (by + 1)];
        let mut xlogx = vec![0.0; stride * (by + 1)];
        for j in 0..by {
            let (mut rs, mut rx) = (0.0, 0.0);
            for i in 0..bx {
                rs += block_sum[j * bx + i];
                rx += block_xlogx[j * bx + i];
                let k = (j + 1) * stride + i + 1;
                sum[k] = sum[k - stride] + rs;
                xlogx[k] = xlogx[k - stride] + rx;
            }
        }
        WindowStatsTable { xs, ys, sum, xlogx }
    }

    fn rect(&self, t: &[f64], i0: usize, j0: usize, i1: usize, j1: usize) -> f64 {
        let s = self.xs.len();
        t[j1 * s + i1] - t[j0 * s + i1] - t[j1 * s + i0] + t[j0 * s + i0]
    }

    /// Same as [`window_stats`]; falls back to it when `b` is not on the lattice.
    pub fn stats(&self, hm: &HeatMap, b: &BBox) -> Result<(f64, f64)> {
        let (x0, y0, x1, y1) = pixel_rect(hm, b)?;
        let find = |edges: &[usize], v: usize| edges.binary_search(&v).ok();
        let (Some(i0), Some(i1), Some(j0), Some(j1)) =
            (find(&self.xs, x0), find(&self.xs, x1), find(&self.ys, y0), find(&self.ys, y1))
        else {
            return window_stats(hm, b);
        };
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        let eps = DEFAULT_EPSILON;
        let raw = self.rect(&self.sum, i0, j0, i1, j1).max(0.0);
        let total = raw + n * eps;
        let xlogx = self.rect(&self.xlogx, i0, j0, i1, j1) + n * eps * eps.ln();
        let h = total.ln() - xlogx / total;
        Ok((raw / n, (h / n.ln()).clamp(0.0, 1.0)))
    }
}

pub fn score_window(m: f64, h_s: f64, cfg: &RoutingConfig) -> f64 {
    match cfg.scoring_variant {
        ScoringVariant::Product => m * h_s,
        ScoringVariant::MeanOnly => m,
        ScoringVariant::EntropyOnly => h_s,
        ScoringVariant::GammaSharpened => m.powf(cfg.gamma) * h_s,
        ScoringVariant::SoftGated => {
            let phi = 1.0 / (1.0 + (-cfg.soft_k * (m - cfg.mu)).exp());
            phi * h_s
        }
    }
}

/// Every grid window with its statistics and score, in emission order.
pub fn score_all_windows(hm: &HeatMap, cfg: &RoutingConfig) -> Result<Vec<WindowCandidate>> {
    let windows = generate_windows(hm.width() as u32, hm.height() as u32, cfg);
    let edges: Vec<BBox> = windows.iter().map(|w| w.bbox).collect();
    let table = WindowStatsTable::new(hm, &edges);
    windows
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let (m, h_s) = table.stats(hm, &w.bbox)?;
            Ok(WindowCandidate {
                bbox: w.bbox,
                scale: w.scale,
                m,
                h_s,
                sigma: score_window(m, h_s, cfg),
                grid_index: i,
            })
        })
        .collect()
}

/// Filter by `m >= mu` and `h_s >= tau_w`, suppress overlapping windows by score and keep the top K.
///
/// Does not consult the global gate; callers decide whether to run it.
pub fn select_candidates(hm: &HeatMap, cfg: &RoutingConfig) -> Result<Vec<WindowCandidate>> {
    if cfg.top_k == 0 {
        return Ok(Vec::new());
    }
    let mut pool: Vec<WindowCandidate> =
        score_all_windows(hm, cfg)?.into_iter().filter(|c| c.m >= cfg.mu && c.h_s >= cfg.tau_w).collect();
    pool.sort_by(|a, b| b.sigma.total_cmp(&a.sigma).then(a.grid_index.cmp(&b.grid_index)));

    let mut keep: Vec<WindowCandidate> = Vec::with_capacity(cfg.top_k);
    for c in pool {
        if keep.len() == cfg.top_k {
            break;
        }
        if keep.iter().all(|k| iou(&k.bbox, &c.bbox) <= cfg.window_nms_iou) {
            keep.push(c);
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> RoutingConfig {
        RoutingConfig::default()
    }

    fn map(w: usize, h: usize, data: Vec<f64>, sae: f64) -> HeatMap {
        HeatMap::from_normalized(w, h, data, sae).unwrap()
    }

    #[test]
    fn gate_truth_table() {
        let with = |sae: f64, mean: f64| map(1, 2, vec![mean, mean], sae);
        assert!(evaluate_gate(&with(0.8, 0.4), &cfg()));
        assert!(!evaluate_gate(&with(0.6, 0.4), &cfg()));
        assert!(!evaluate_gate(&with(0.8, 0.2), &cfg()));
    }

    // Enumerate every integer offset and keep those a stepped/flush scan would produce.
    fn enumerate_positions(extent: u32, size: u32, stride: u32) -> Vec<u32> {
        let mut v: Vec<u32> =
            (0..=extent.saturating_sub(size)).filter(|p| p % stride == 0 || *p == extent - size).collect();
        v.dedup();
        v
    }

    #[test]
    fn window_counts_match_enumeration() {
        let w = generate_windows(256, 256, &cfg());
        let per_scale = |s: f64| w.iter().filter(|x| x.scale == s).count();
        assert_eq!(per_scale(0.25), 49);
        assert_eq!(per_scale(0.5), 9);
        assert_eq!(per_scale(0.75), 4);
        assert_eq!(w.len(), 62);
        for (size, stride) in [(64, 32), (128, 64), (192, 96)] {
            let n = enumerate_positions(256, size, stride).len();
            assert_eq!(n * n, w.iter().filter(|x| x.bbox.width() == size as f64).count());
        }
        assert_eq!(axis_positions(256, 192, 96), vec![0, 64]);
    }

    #[test]
    fn small_images_skip_scales() {
        let c = RoutingConfig { scales: vec![0.25], ..cfg() };
        assert!(generate_windows(128, 128, &c).is_empty());
        let c = RoutingConfig { scales: vec![0.5], min_window_px: 1, ..cfg() };
        let w = generate_windows(100, 100, &c);
        assert_eq!(w.len(), 9);
        assert_eq!(enumerate_positions(100, 50, 25), vec![0, 25, 50]);
        assert_eq!(axis_positions(100, 50, 25), vec![0, 25, 50]);
    }

    #[test]
    fn emission_order_is_scale_y_x() {
        let w = generate_windows(300, 200, &cfg());
        for pair in w.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert!((a.scale, a.bbox.y1, a.bbox.x1) < (b.scale, b.bbox.y1, b.bbox.x1), "{a:?} before {b:?}");
        }
    }

    #[test]
    fn stats_closed_forms() {
        let hm = map(2, 2, vec![0.5; 4], 1.0);
        let (m, h) = window_stats(&hm, &BBox::image(2, 2)).unwrap();
        assert_eq!(m, 0.5);
        assert!((h - 1.0).abs() < 1e-12);

        let hm = map(2, 2, vec![1.0, 0.0, 0.0, 0.0], 1.0);
        let (m, h) = window_stats(&hm, &BBox::image(2, 2)).unwrap();
        assert_eq!(m, 0.25);
        assert!(h < 1e-6);

        let one_px = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(window_stats(&hm, &one_px).is_err());
        assert!(window_stats(&hm, &BBox::image(3, 2)).is_err());
    }

    #[test]
    fn stats_match_scalar_loop_and_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..16 * 16).map(|_| rng.random::<f64>()).collect();
        let hm = map(16, 16, data.clone(), 0.9);
        let b = BBox::new(3.0, 5.0, 11.0, 13.0).unwrap();

        let vals: Vec<f64> =
            (5..13).flat_map(|y| (3..11).map(move |x| (x, y))).map(|(x, y)| data[y * 16 + x]).collect();
        let m_ref = vals.iter().sum::<f64>() / 64.0;
        let z: f64 = vals.iter().map(|v| v + 1e-8).sum();
        let mut h_ref = 0.0;
        for v in &vals {
            let p = (v + 1e-8) / z;
            h_ref += -p * p.ln();
        }
        h_ref /= 64f64.ln();

        let (m, h) = window_stats(&hm, &b).unwrap();
        assert!((m - m_ref).abs() < 1e-9 && (h - h_ref).abs() < 1e-9);
        let (mt, ht) = WindowStatsTable::new(&hm, &[b]).stats(&hm, &b).unwrap();
        assert!((mt - m_ref).abs() < 1e-9 && (ht - h_ref).abs() < 1e-9);
        let off_lattice = BBox::new(2.0, 5.0, 11.0, 13.0).unwrap();
        let table = WindowStatsTable::new(&hm, &[b]);
        assert_eq!(table.stats(&hm, &off_lattice).unwrap(), window_stats(&hm, &off_lattice).unwrap());
    }

    #[test]
    fn scoring_variants() {
        let mut c = cfg();
        assert!((score_window(0.5, 0.8, &c) - 0.4).abs() < 1e-15);
        c.scoring_variant = ScoringVariant::MeanOnly;
        assert_eq!(score_window(0.5, 0.8, &c), 0.5);
        c.scoring_variant = ScoringVariant::EntropyOnly;
        assert_eq!(score_window(0.5, 0.8, &c), 0.8);
        c.scoring_variant = ScoringVariant::GammaSharpened;
        c.gamma = 2.0;
        assert!((score_window(0.5, 0.8, &c) - 0.2).abs() < 1e-15);
        c.scoring_variant = ScoringVariant::SoftGated;
        assert!((score_window(0.3, 0.8, &c) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_selections() {
        let hm = map(256, 256, vec![0.0; 256 * 256], 1.0);
        assert!(select_candidates(&hm, &cfg()).unwrap().is_empty());
        let hm = map(256, 256, vec![0.5; 256 * 256], 1.0);
        let c = RoutingConfig { top_k: 0, ..cfg() };
        assert!(select_candidates(&hm, &c).unwrap().is_empty());
        assert_eq!(select_candidates(&hm, &cfg()).unwrap().len(), 5);
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let text = serde_json::to_string(&cfg()).unwrap();
        let back: RoutingConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg());
        assert!(serde_json::from_str::<RoutingConfig>(r#"{"tau":0.5}"#).is_err());
        let c: RoutingConfig = serde_json::from_str(r#"{"top_k":3,"scoring_variant":"soft_gated"}"#).unwrap();
        assert_eq!(c.top_k, 3);
        assert_eq!(c.scoring_variant, ScoringVariant::SoftGated);
        assert_eq!(c.tau_g, 0.7);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(RoutingConfig { scales: vec![1.0], ..cfg() }.validate().is_err());
        assert!(RoutingConfig { mu: 1.5, ..cfg() }.validate().is_err());
        assert!(RoutingConfig { stride_fraction: 0.0, ..cfg() }.validate().is_err());
    }
}
