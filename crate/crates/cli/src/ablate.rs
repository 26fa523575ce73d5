use std::fs;
use std::str::FromStr;

use anyhow::Context;
use attnroute::{RouteMode, ScoringVariant};
use serde::{Deserialize, Serialize};

use crate::manifest::{write_json, RunManifest};
use crate::{route, Usage};

pub const PARAMS: [&str; 6] = ["top_k", "tau_w", "tau_g", "alpha", "fusion_enabled", "scoring_variant"];

/// One `PARAM=V1,V2,..` sweep request.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub param: String,
    pub values: Vec<String>,
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (param, list) = s.split_once('=').ok_or_else(|| format!("expected PARAM=V1,V2,.. in {s:?}"))?;
        let param = param.trim().to_string();
        if !PARAMS.contains(&param.as_str()) {
            return Err(format!("cannot sweep {param:?}; choose one of {}", PARAMS.join(", ")));
        }
        let values: Vec<String> =
            list.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
        if values.is_empty() {
            return Err(format!("no values given for {param}"));
        }
        Ok(Sweep { param, values })
    }
}

fn parse<T: FromStr>(param: &str, v: &str) -> anyhow::Result<T> {
    v.parse().map_err(|_| Usage(format!("bad value {v:?} for {param}")).into())
}

/// Returns a copy of `m` with `param` set to `value`.
pub fn apply(m: &RunManifest, param: &str, value: &str) -> anyhow::Result<RunManifest> {
    let mut m = m.clone();
    match param {
        "top_k" => m.routing.top_k = parse(param, value)?,
        "tau_w" => m.routing.tau_w = parse(param, value)?,
        "tau_g" => m.routing.tau_g = parse(param, value)?,
        "alpha" => m.fusion.alpha = parse(param, value)?,
        "fusion_enabled" => m.fusion.fusion_enabled = parse(param, value)?,
        "scoring_variant" => m.routing.scoring_variant = parse::<ScoringVariant>(param, value)?,
        other => return Err(Usage(format!("cannot sweep {other:?}")).into()),
    }
    m.routing.validate().map_err(|e| Usage(e.to_string()))?;
    m.fusion.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub param: String,
    pub value: String,
    pub map50: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub mean_k_prime: f64,
    pub total_crops: usize,
    pub predicted_cost_factor: f64,
    pub measured_cost_factor: f64,
    /// Throughput implied by the detector-reported latencies.
    pub fps: f64,
    /// Throughput measured around the whole pipeline.
    pub wall_fps: f64,
}

pub fn run(m: &RunManifest, sweep: &Sweep, mode: RouteMode) -> anyhow::Result<Vec<AblationRow>> {
    m.write_copy()?;
    let entries = m.load_scenes()?;
    if entries.is_empty() {
        return Err(Usage(format!("dataset {} has no scenes to sweep over", m.dataset.display())).into());
    }
    let variants =
        sweep.values.iter().map(|v| apply(m, &sweep.param, v)).collect::<anyhow::Result<Vec<_>>>()?;

    let detector = m.open_detector()?;
    let mut rows = Vec::with_capacity(variants.len());
    for (value, variant) in sweep.values.iter().zip(&variants) {
        let run = route::execute(variant, detector.as_ref(), &entries, mode, false)?;
        let (report, eval) = run.report.zip(run.eval).expect("non-empty dataset has a report");
        let n = run.traces.len() as f64;
        let modelled_ms: f64 = run.traces.iter().map(|t| t.base_latency_ms + t.crop_latency_ms()).sum();
        let wall_ms: f64 = run.traces.iter().map(|t| t.wall_ms).sum();
        rows.push(AblationRow {
            param: sweep.param.clone(),
            value: value.clone(),
            map50: eval.map50,
            ap_s: eval.ap_s,
            ap_m: eval.ap_m,
            ap_l: eval.ap_l,
            mean_k_prime: report.mean_k_prime,
            total_crops: report.total_crops,
            predicted_cost_factor: report.predicted_cost_factor,
            measured_cost_factor: report.measured_cost_factor,
            fps: 1000.0 * n / modelled_ms,
            wall_fps: 1000.0 * n / wall_ms,
        });
    }

    write_json(&m.output_dir.join("ablation.json"), &rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let table = String::from_utf8(w.into_inner()?)?;
    fs::write(m.output_dir.join("ablation.csv"), &table).context("writing ablation.csv")?;
    print!("{table}");
    Ok(rows)
}
