use std::fmt;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use attnroute::detector::bridge::serve;
use attnroute::scenes::{write_dataset, SceneSpec};
use attnroute::{
    evaluate_map, run_fps_bench, MockDetector, MockDetectorParams, Pipeline, RouteMode, ScoredBox,
};
use clap::{Parser, Subcommand};

mod ablate;
mod manifest;
mod route;

use manifest::{write_json, RunManifest};

/// Bad input from the command line or a manifest; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "attnroute", version, about = "Attention-entropy crop routing for small-object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Replaces the manifest's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the manifest's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "entropy")]
    mode: RouteMode,
}

impl RunArgs {
    fn manifest(&self) -> anyhow::Result<RunManifest> {
        RunManifest::load(&self.manifest)?.resolve(self.seed, self.out.clone())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (scene JSON files plus manifest.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene generator settings as JSON; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Route every scene of a dataset and write detections, report and evaluation.
    Route {
        #[command(flatten)]
        run: RunArgs,
        /// Write one PGM heatmap per image that had attention routing.
        #[arg(long)]
        emit_heatmaps: bool,
    },
    /// Re-run routing for each value of one parameter and tabulate the results.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// PARAM=V1,V2,.. with PARAM one of top_k, tau_w, tau_g, alpha, fusion_enabled, scoring_variant.
        #[arg(long)]
        sweep: ablate::Sweep,
    },
    /// Time the pipeline with warm-up, one image at a time.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
    },
    /// Score a stored detections.json against the manifest's dataset.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Serve the detector protocol on stdin/stdout with the mock detector.
    #[command(hide = true)]
    MockBridge {
        /// MockDetectorParams as inline JSON.
        #[arg(long)]
        params: Option<String>,
        #[arg(long)]
        attention_dir: Option<PathBuf>,
    },
}

fn synth(out: PathBuf, count: u64, seed: u64, spec: Option<PathBuf>) -> anyhow::Result<()> {
    let spec: SceneSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| Usage(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Usage(format!("invalid spec {}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    let seeds: Vec<u64> = (seed..seed + count).collect();
    let path = write_dataset(&out, &spec, &seeds)?;
    println!("{}", path.display());
    Ok(())
}

fn bench(m: &RunManifest, mode: RouteMode, warmup: usize, iters: usize) -> anyhow::Result<()> {
    m.write_copy()?;
    let entries = m.load_scenes()?;
    if entries.is_empty() {
        return Err(Usage(format!("dataset {} has no scenes to time", m.dataset.display())).into());
    }
    let detector = m.open_detector()?;
    let mut p = Pipeline::new(detector.as_ref(), mode);
    p.routing = m.routing.clone();
    p.fusion = m.fusion.clone();
    p.slicing = m.slicing.clone();
    p.seed = m.seed;
    p.validate()?;
    let inputs: Vec<_> = m.inputs(&entries).into_iter().enumerate().collect();
    let result = run_fps_bench(&inputs, warmup, iters, |(i, inp)| p.process(*i, inp).map(|_| ()))?;
    write_json(&m.output_dir.join("bench.json"), &result)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn eval(manifest: PathBuf, predictions: PathBuf) -> anyhow::Result<()> {
    let m = RunManifest::load(&manifest)?;
    let entries = m.load_scenes()?;
    let text = std::fs::read_to_string(&predictions)
        .map_err(|e| Usage(format!("cannot read predictions {}: {e}", predictions.display())))?;
    let stored: Vec<route::ImageDetections> = serde_json::from_str(&text)
        .map_err(|e| Usage(format!("invalid predictions {}: {e}", predictions.display())))?;
    let mut preds: Vec<Vec<ScoredBox>> = vec![Vec::new(); entries.len()];
    for img in stored {
        let slot = preds
            .get_mut(img.index)
            .ok_or_else(|| Usage(format!("prediction for image {} outside the dataset", img.index)))?;
        slot.extend(img.detections.iter().map(|d| d.scored()));
    }
    let truth: Vec<_> = entries.into_iter().map(|e| e.scene).collect();
    let result = evaluate_map(&preds, &truth)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn mock_bridge(params: Option<String>, attention_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let params: MockDetectorParams = match params {
        Some(json) => serde_json::from_str(&json).map_err(|e| Usage(format!("invalid --params: {e}")))?,
        None => MockDetectorParams::default(),
    };
    let detector = MockDetector::new(params)?;
    let dir = attention_dir
        .unwrap_or_else(|| std::env::temp_dir().join(format!("attnroute-{}", std::process::id())));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    serve(&detector, io::stdin().lock(), io::stdout().lock(), &dir)?;
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { out, count, seed, spec } => synth(out, count, seed, spec),
        Command::Route { run, emit_heatmaps } => route::run(&run.manifest()?, run.mode, emit_heatmaps),
        Command::Ablate { run, sweep } => ablate::run(&run.manifest()?, &sweep, run.mode).map(|_| ()),
        Command::Bench { run, warmup, iters } => bench(&run.manifest()?, run.mode, warmup, iters),
        Command::Eval { manifest, predictions } => eval(manifest, predictions),
        Command::MockBridge { params, attention_dir } => mock_bridge(params, attention_dir),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.downcast_ref::<Usage>().is_some()
        || matches!(e.downcast_ref::<attnroute::Error>(), Some(attnroute::Error::Config(_)));
    if usage {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
