//! Decoder cross-attention to heatmap: aggregation, smoothing, spatial entropy and upsampling.
//!
//! The raw tensor is averaged over layers, heads and queries into one score per
//! spatial key. Those scores are smoothed into a probability distribution whose
//! normalized Shannon entropy measures how dispersed the detector's attention is.
//! Separately, the key scores are reshaped to the key grid, bilinearly resampled
//! to image resolution and min-max normalized into the heatmap used for routing.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing constant added to every key before normalization.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// First line of an attention tensor file.
pub const ATTENTION_MAGIC: &str = "VICROPAT1";

/// Raw cross-attention indexed `[layer, head, query, key]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    queries: usize,
    key_grid: (usize, usize),
    values: Vec<f32>,
}

impl AttentionTensor {
    /// `key_grid` is `(rows, cols)`; the key count is their product.
    pub fn new(
        layers: usize,
        heads: usize,
        queries: usize,
        key_grid: (usize, usize),
        values: Vec<f32>,
    ) -> Result<Self> {
        let keys = key_grid.0 * key_grid.1;
        if layers == 0 || heads == 0 || queries == 0 || keys == 0 {
            return Err(Error::Structural(format!(
                "empty dimension in L={layers} Nh={heads} Nq={queries} grid={key_grid:?}"
            )));
        }
        let expected = layers * heads * queries * keys;
        if values.len() != expected {
            return Err(Error::Structural(format!(
                "expected {expected} attention values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!("attention value {bad} is negative or non-finite")));
        }
        Ok(AttentionTensor { layers, heads, queries, key_grid, values })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.key_grid.0 * self.key_grid.1
    }

    pub fn key_grid(&self) -> (usize, usize) {
        self.key_grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Number of `(layer, head, query)` rows.
    pub fn rows(&self) -> usize {
        self.layers * self.heads * self.queries
    }

    pub fn scaled(&self, factor: f32) -> Result<Self> {
        AttentionTensor::new(
            self.layers,
            self.heads,
            self.queries,
            self.key_grid,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::AttentionFormat { path: path.to_path_buf(), reason })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f =
            fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Encodes magic line, JSON header line and little-endian f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = TensorHeader {
            layers: self.layers,
            heads: self.heads,
            queries: self.queries,
            keys: self.keys(),
            grid_rows: self.key_grid.0,
            grid_cols: self.key_grid.1,
            densified: None,
        };
        let mut out = Vec::with_capacity(64 + 4 * self.values.len());
        out.extend_from_slice(ATTENTION_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (magic, rest) = split_line(bytes).ok_or("missing magic line")?;
        if magic != ATTENTION_MAGIC.as_bytes() {
            return Err(format!("bad magic {:?}", String::from_utf8_lossy(&magic[..magic.len().min(16)])));
        }
        let (header, payload) = split_line(rest).ok_or("missing header line")?;
        let header: TensorHeader = serde_json::from_slice(header).map_err(|e| format!("bad header: {e}"))?;
        if header.grid_rows * header.grid_cols != header.keys {
            return Err(format!(
                "key grid {}x{} does not match Nk={}",
                header.grid_rows, header.grid_cols, header.keys
            ));
        }
        let count = header.layers * header.heads * header.queries * header.keys;
        if payload.len() != 4 * count {
            return Err(format!("payload has {} bytes, header implies {}", payload.len(), 4 * count));
        }
        let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        AttentionTensor::new(
            header.layers,
            header.heads,
            header.queries,
            (header.grid_rows, header.grid_cols),
            values,
        )
        .map_err(|e| e.to_string())
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let pos = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..pos], &bytes[pos + 1..]))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "Nh")]
    heads: usize,
    #[serde(rename = "Nq")]
    queries: usize,
    #[serde(rename = "Nk")]
    keys: usize,
    #[serde(rename = "Hk")]
    grid_rows: usize,
    #[serde(rename = "Wk")]
    grid_cols: usize,
    /// Set by bridges that scatter sparse sampling points onto the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    densified: Option<bool>,
}

/// Mean attention received by each key over all layers, heads and queries.
pub fn aggregate_attention(t: &AttentionTensor) -> Vec<f64> {
    let nk = t.keys();
    let mut acc = vec![0.0f64; nk];
    for row in t.values.chunks_exact(nk) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = t.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Smoothed probability distribution over spatial keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    p: Vec<f64>,
    epsilon: f64,
}

impl ProbabilityMap {
    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// `p_i = (a_i + eps) / sum_j (a_j + eps)`.
pub fn normalize_probability(a: &[f64], epsilon: f64) -> Result<ProbabilityMap> {
    if a.is_empty() {
        return Err(Error::Domain("cannot normalize an empty vector".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon {epsilon} must be finite and >= 0")));
    }
    if let Some(bad) = a.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Domain(format!("value {bad} is negative or non-finite")));
    }
    let total: f64 = a.iter().map(|v| v + epsilon).sum();
    if total <= 0.0 {
        return Err(Error::Domain("all-zero input with zero epsilon".into()));
    }
    Ok(ProbabilityMap { p: a.iter().map(|v| (v + epsilon) / total).collect(), epsilon })
}

/// Normalized Shannon entropy in `[0, 1]`, natural log in both numerator and normalizer.
pub fn spatial_attention_entropy(p: &ProbabilityMap) -> Result<f64> {
    let n = p.len();
    if n < 2 {
        return Err(Error::Domain(format!("entropy needs at least 2 keys, got {n}")));
    }
    let h: f64 = p.p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    Ok((h / (n as f64).ln()).clamp(0.0, 1.0))
}

/// Min-max normalized attention map at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    sae_global: f64,
    mean_h: f64,
    degenerate: bool,
}

impl HeatMap {
    /// Builds a heatmap directly from already-normalized values (tests, fixtures).
    ///
    /// Values must lie in `[0, 1]`; no renormalization is applied.
    pub fn from_normalized(width: usize, height: usize, data: Vec<f64>, sae_global: f64) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Structural(format!("heatmap {width}x{height} with {} values", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("heatmap value {bad} outside [0,1]")));
        }
        let mean_h = data.iter().sum::<f64>() / data.len() as f64;
        Ok(HeatMap { width, height, data, sae_global: sae_global.clamp(0.0, 1.0), mean_h, degenerate: false })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major values in `[0, 1]`.
    /// Gives the pixel buffer back, e.g. for reuse by [`build_heatmap_in`].
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Image-level entropy computed on the key-grid distribution.
    pub fn sae_global(&self) -> f64 {
        self.sae_global
    }

    pub fn mean(&self) -> f64 {
        self.mean_h
    }

    /// True when the upsampled map was constant and was filled with 0.5.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Multiplies every value by `c` in `[0, 1]`; entropy is left untouched.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain(format!("scale {c} outside [0,1]")));
        }
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out.mean_h *= c;
        Ok(out)
    }

    /// Binary 8-bit PGM, value `round(255 h)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Aggregate, reshape to the key grid, upsample to `(width, height)` and min-max normalize.
pub fn build_heatmap(t: &AttentionTensor, width: usize, height: usize) -> Result<HeatMap> {
    build_heatmap_in(t, width, height, Vec::new())
}

/// [`build_heatmap`] writing into a recycled buffer (see [`HeatMap::into_data`]).
pub fn build_heatmap_in(
    t: &AttentionTensor,
    width: usize,
    height: usize,
    mut buf: Vec<f64>,
) -> Result<HeatMap> {
    if width == 0 || height == 0 {
        return Err(Error::Domain(format!("image size {width}x{height}")));
    }
    let keys = aggregate_attention(t);
    let sae_global = if keys.len() >= 2 {
        spatial_attention_entropy(&normalize_probability(&keys, DEFAULT_EPSILON)?)?
    } else {
        // A single key has no spatial dispersion to measure.
        0.0
    };
    let (rows, cols) = t.key_grid();
    let up = Upsampler::new(&keys, cols, rows, width, height);
    let (lo, hi) = up.extremes();
    let degenerate = hi - lo <= 1e-12 * hi.abs().max(f64::MIN_POSITIVE);

    buf.clear();
    buf.resize(width * height, 0.5);
    let mut data = buf;
    let mut mean_h = 0.5;
    if !degenerate {
        // Upsample, normalize and sum row by row so the full map is written once.
        let inv = 1.0 / (hi - lo);
        let mut sum = 0.0;
        for (y, row) in data.chunks_exact_mut(width).enumerate() {
            sum += up.row_normalized(y, row, lo, inv);
        }
        mean_h = sum / (width * height) as f64;
    }
    Ok(HeatMap { width, height, data, sae_global, mean_h, degenerate })
}

const LANES: usize = 8;

/// Per-output-coordinate source taps for one axis: `(i0, i1, frac)`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Separable bilinear upsampler: the horizontal pass is done once per source row,
/// output rows are then blends of two of those.
struct Upsampler {
    rows: Vec<f64>,
    ys: Vec<(usize, usize, f64)>,
    dst_w: usize,
}

impl Upsampler {
    fn new(src: &[f64], src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Self {
        debug_assert_eq!(src.len(), src_w * src_h);
        let xs = axis_taps(src_w, dst_w);
        let mut rows = vec![0.0; src_h * dst_w];
        for (line, out) in src.chunks_exact(src_w).zip(rows.chunks_exact_mut(dst_w)) {
            for (o, &(i0, i1, f)) in out.iter_mut().zip(&xs) {
                *o = line[i0] + (line[i1] - line[i0]) * f;
            }
        }
        Upsampler { rows, ys: axis_taps(src_h, dst_h), dst_w }
    }

    fn row(&self, y: usize, out: &mut [f64]) {
        let (j0, j1, f) = self.ys[y];
        let w = self.dst_w;
        let a = &self.rows[j0 * w..(j0 + 1) * w];
        let b = &self.rows[j1 * w..(j1 + 1) * w];
        for ((d, &va), &vb) in out.iter_mut().zip(a).zip(b) {
            *d = va + (vb - va) * f;
        }
    }

    /// Writes row `y` mapped through `(v - lo) * inv` (capped at 1) and returns its sum.
    fn row_normalized(&self, y: usize, out: &mut [f64], lo: f64, inv: f64) -> f64 {
        let (j0, j1, f) = self.ys[y];
        let w = self.dst_w;
        let a = &self.rows[j0 * w..(j0 + 1) * w];
        let b = &self.rows[j1 * w..(j1 + 1) * w];
        let norm = |va: f64, vb: f64| {
            let n = (va + (vb - va) * f - lo) * inv;
            if n > 1.0 {
                1.0
            } else {
                n
            }
        };
        // Independent accumulators let the reduction vectorize.
        let mut acc = [0.0; LANES];
        let mut oc = out.chunks_exact_mut(LANES);
        let (mut ac, mut bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
        for ((o, ca), cb) in (&mut oc).zip(&mut ac).zip(&mut bc) {
            for k in 0..LANES {
                o[k] = norm(ca[k], cb[k]);
                acc[k] += o[k];
            }
        }
        let mut tail = 0.0;
        for ((o, &va), &vb) in oc.into_remainder().iter_mut().zip(ac.remainder()).zip(bc.remainder()) {
            *o = norm(va, vb);
            tail += *o;
        }
        acc.iter().sum::<f64>() + tail
    }

    /// Minimum and maximum over the whole output.
    ///
    /// Within a run of output rows sharing the same source pair the blend weight grows
    /// with `y`, and `a + (b - a) f` is monotone in `f` even under rounding, so each
    /// column's extremes sit on the first or last row of a run.
    fn extremes(&self) -> (f64, f64) {
        let mut buf = vec![0.0; self.dst_w];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let n = self.ys.len();
        for y in 0..n {
            let (j0, j1, _) = self.ys[y];
            let same = |o: usize| self.ys[o].0 == j0 && self.ys[o].1 == j1;
            let run_start = y == 0 || !same(y - 1);
            let run_end = y + 1 == n || !same(y + 1);
            if run_start || run_end {
                self.row(y, &mut buf);
                for &v in &buf {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        (lo, hi)
    }
}

/// Separable bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f64], src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Vec<f64> {
    let up = Upsampler::new(src, src_w, src_h, dst_w, dst_h);
    let mut out = vec![0.0; dst_w * dst_h];
    for (y, row) in out.chunks_exact_mut(dst_w).enumerate() {
        up.row(y, row);
    }
    out
}
