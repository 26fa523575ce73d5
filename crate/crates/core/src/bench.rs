//! Cost model, end-to-end throughput protocol and per-run routing reports.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ImageTrace;

/// Relative slack allowed between measured and predicted cost factors.
pub const COST_TOLERANCE: f64 = 0.05;

/// Worst-case cost of one image relative to a single full-image pass: `1 + K r`.
pub fn cost_model(top_k: usize, crop_ratio: f64) -> f64 {
    1.0 + top_k as f64 * crop_ratio
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub fps: f64,
    pub ms_per_image: f64,
    pub warmup_count: usize,
    pub timed_count: usize,
    pub total_seconds: f64,
}

/// Runs `warmup` untimed iterations, then times `iters` iterations one image at a time.
///
/// `step` must return only after the image is fully processed. Images are cycled
/// when fewer than `warmup + iters` are supplied.
pub fn run_fps_bench<T, F>(images: &[T], warmup: usize, iters: usize, mut step: F) -> Result<BenchResult>
where
    F: FnMut(&T) -> Result<()>,
{
    if iters == 0 {
        return Err(Error::Domain("timed iteration count must be positive".into()));
    }
    if images.is_empty() {
        return Err(Error::Domain("benchmark needs at least one image".into()));
    }
    let mut cycle = images.iter().cycle();
    for _ in 0..warmup {
        step(cycle.next().expect("cycle is infinite"))?;
    }
    let mut total = 0.0f64;
    for _ in 0..iters {
        let img = cycle.next().expect("cycle is infinite");
        let start = Instant::now();
        step(img)?;
        total += start.elapsed().as_secs_f64();
    }
    let fps = iters as f64 / total.max(f64::MIN_POSITIVE);
    Ok(BenchResult {
        fps,
        ms_per_image: 1000.0 / fps,
        warmup_count: warmup,
        timed_count: iters,
        total_seconds: total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub index: usize,
    pub gate: Option<bool>,
    pub k_prime: usize,
    pub base_latency_ms: f64,
    pub crop_latency_ms: f64,
    pub wall_ms: f64,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub images: Vec<ImageRow>,
    pub top_k: usize,
    pub mean_k_prime: f64,
    /// Mean crop-to-full latency ratio over all crops; `None` when nothing was cropped.
    pub mean_r: Option<f64>,
    /// `1 + K r̄`, or 1 when nothing was cropped.
    pub predicted_cost_factor: f64,
    /// Total detector time over total full-image detector time.
    pub measured_cost_factor: f64,
    /// Whether the measured factor stayed within the predicted worst case plus tolerance.
    pub within_cost_bound: bool,
    pub total_crops: usize,
    pub gated_in: usize,
}

pub fn routing_report(traces: &[ImageTrace], top_k: usize) -> Result<RoutingReport> {
    if traces.is_empty() {
        return Err(Error::Domain("routing report needs at least one image".into()));
    }
    let images: Vec<ImageRow> = traces
        .iter()
        .map(|t| ImageRow {
            index: t.index,
            gate: t.gate,
            k_prime: t.k_prime(),
            base_latency_ms: t.base_latency_ms,
            crop_latency_ms: t.crop_latency_ms(),
            wall_ms: t.wall_ms,
            detections: t.detections.len(),
        })
        .collect();
    let ratios: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.crops.iter().map(move |c| c.latency_ms / t.base_latency_ms))
        .filter(|r| r.is_finite())
        .collect();
    let mean_r = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    let predicted = cost_model(top_k, mean_r.unwrap_or(0.0));
    let base: f64 = images.iter().map(|r| r.base_latency_ms).sum();
    let crops: f64 = images.iter().map(|r| r.crop_latency_ms).sum();
    let measured = if base > 0.0 { (base + crops) / base } else { 1.0 };
    let total_crops: usize = images.iter().map(|r| r.k_prime).sum();
    Ok(RoutingReport {
        top_k,
        mean_k_prime: total_crops as f64 / images.len() as f64,
        mean_r,
        predicted_cost_factor: predicted,
        measured_cost_factor: measured,
        within_cost_bound: measured <= predicted * (1.0 + COST_TOLERANCE),
        total_crops,
        gated_in: images.iter().filter(|r| r.gate == Some(true)).count(),
        images,
    })
}

impl RoutingReport {
    /// One CSV row per image.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.images {
            w.serialize(row).map_err(|e| Error::Structural(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Structural(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::pipeline::CropRecord;

    fn trace(gate: bool, crops: usize) -> ImageTrace {
        ImageTrace {
            index: 0,
            gate: Some(gate),
            sae_global: None,
            mean_h: None,
            degenerate_heatmap: false,
            base_latency_ms: 20.0,
            crops: (0..crops)
                .map(|_| CropRecord {
                    bbox: BBox::image(10, 10),
                    scale: 0.25,
                    m: None,
                    h_s: None,
                    sigma: None,
                    latency_ms: 5.0,
                })
                .collect(),
            wall_ms: 20.0 + 5.0 * crops as f64,
            detections: Vec::new(),
            heatmap: None,
        }
    }

    #[test]
    fn cost_model_values() {
        assert_eq!(cost_model(5, 0.25), 2.25);
        assert_eq!(cost_model(0, 0.25), 1.0);
        assert_eq!(cost_model(3, 0.25), 1.75);
    }

    #[test]
    fn all_gated_out() {
        let r = routing_report(&[trace(false, 0), trace(false, 0)], 5).unwrap();
        assert_eq!(r.mean_k_prime, 0.0);
        assert_eq!(r.measured_cost_factor, 1.0);
        assert!(r.mean_r.is_none());
        assert!(r.within_cost_bound);
    }

    #[test]
    fn full_budget_matches_model() {
        let r = routing_report(&[trace(true, 5), trace(true, 5)], 5).unwrap();
        assert_eq!(r.mean_r, Some(0.25));
        assert!((r.measured_cost_factor - 2.25).abs() < 1e-12);
        assert_eq!(r.predicted_cost_factor, 2.25);
    }

    #[test]
    fn mixed_gates_lie_strictly_between() {
        let r = routing_report(&[trace(true, 5), trace(false, 0), trace(true, 2)], 5).unwrap();
        assert!(r.measured_cost_factor > 1.0 && r.measured_cost_factor < r.predicted_cost_factor);
        assert_eq!(r.gated_in, 2);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn bench_rejects_zero_iterations() {
        assert!(run_fps_bench(&[()], 1, 0, |_| Ok(())).is_err());
    }

    #[test]
    fn bench_identity() {
        let r = run_fps_bench(&[1, 2, 3], 2, 5, |_| {
            std::thread::sleep(std::time::Duration::from_millis(1));
            Ok(())
        })
        .unwrap();
        assert!((r.fps * r.ms_per_image - 1000.0).abs() < 1e-6);
        assert_eq!(r.timed_count, 5);
    }
}
