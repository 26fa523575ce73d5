use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use attnroute::scenes::SceneEntry;
use attnroute::{
    evaluate_map, routing_report, Detection, Detector, EvalResult, ImageTrace, Pipeline, RouteMode,
    RoutingReport,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{write_json, RunManifest};

/// Final detections of one image as written to `detections.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageDetections {
    pub index: usize,
    pub scene: PathBuf,
    pub detections: Vec<Detection>,
}

pub struct RouteRun {
    pub traces: Vec<ImageTrace>,
    pub report: Option<RoutingReport>,
    pub eval: Option<EvalResult>,
}

/// Routes every scene with an already-open detector and scores the result.
pub fn execute(
    m: &RunManifest,
    detector: &dyn Detector,
    entries: &[SceneEntry],
    mode: RouteMode,
    keep_heatmaps: bool,
) -> anyhow::Result<RouteRun> {
    let mut p = Pipeline::new(detector, mode);
    p.routing = m.routing.clone();
    p.fusion = m.fusion.clone();
    p.slicing = m.slicing.clone();
    p.seed = m.seed;
    p.keep_heatmaps = keep_heatmaps;
    let traces = p.run(&m.inputs(entries))?;
    if traces.is_empty() {
        return Ok(RouteRun { traces, report: None, eval: None });
    }
    let report = routing_report(&traces, m.routing.top_k)?;
    let preds: Vec<_> = traces.iter().map(|t| t.detections.iter().map(Detection::scored).collect()).collect();
    let truth: Vec<_> = entries.iter().map(|e| e.scene.clone()).collect();
    let eval = evaluate_map(&preds, &truth)?;
    Ok(RouteRun { traces, report: Some(report), eval: Some(eval) })
}

pub fn run(m: &RunManifest, mode: RouteMode, emit_heatmaps: bool) -> anyhow::Result<()> {
    m.write_copy()?;
    let entries = m.load_scenes()?;
    let detector = m.open_detector()?;
    let run = execute(m, detector.as_ref(), &entries, mode, emit_heatmaps)?;
    let out = &m.output_dir;

    let detections: Vec<ImageDetections> = run
        .traces
        .iter()
        .zip(&entries)
        .map(|(t, e)| ImageDetections {
            index: t.index,
            scene: e.path.clone(),
            detections: t.detections.clone(),
        })
        .collect();
    write_json(&out.join("detections.json"), &detections)?;
    write_json(&out.join("traces.json"), &run.traces)?;

    if emit_heatmaps {
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for t in &run.traces {
            if let Some(hm) = &t.heatmap {
                hm.write_pgm(&dir.join(format!("heatmap_{:05}.pgm", t.index)))?;
            }
        }
    }

    match (&run.report, &run.eval) {
        (Some(report), Some(eval)) => {
            write_json(&out.join("report.json"), report)?;
            fs::write(out.join("report.csv"), report.to_csv()?).context("writing report.csv")?;
            write_json(&out.join("eval.json"), eval)?;
            println!(
                "{mode}: {} images, {} gated in, {} crops (mean K' {:.2}), cost x{:.3} (bound x{:.3}), mAP@50 {:.4}, AP_S {:.4}",
                run.traces.len(),
                report.gated_in,
                report.total_crops,
                report.mean_k_prime,
                report.measured_cost_factor,
                report.predicted_cost_factor,
                eval.map50,
                eval.ap_s,
            );
        }
        _ => println!("{mode}: dataset is empty, nothing routed"),
    }
    Ok(())
}
