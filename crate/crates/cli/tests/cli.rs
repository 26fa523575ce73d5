use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnroute"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// A dataset of `count` scenes and a run manifest using the given detector.
fn setup(count: u64, detector: Value) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", data.to_str().unwrap(), "--count", &count.to_string(), "--seed", "5"]);
    let manifest = dir.path().join("run.json");
    let m = json!({
        "detector": detector,
        "dataset": "data/manifest.json",
        "output_dir": "out",
        "seed": 11,
    });
    fs::write(&manifest, m.to_string()).unwrap();
    (dir, manifest)
}

fn quiet_mock() -> Value {
    json!({ "mock": { "simulate_latency": false } })
}

fn route(manifest: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["route", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(&args)
}

fn ablate(manifest: &Path, out: &Path, sweep: &str) -> Vec<Value> {
    ok(&[
        "ablate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--sweep",
        sweep,
    ]);
    read_json(&out.join("ablation.json")).as_array().unwrap().clone()
}

#[test]
fn empty_dataset_routes_to_empty_outputs() {
    let (dir, manifest) = setup(0, quiet_mock());
    let out = dir.path().join("out");
    route(&manifest, &out, &[]);
    assert_eq!(read_json(&out.join("detections.json")), json!([]));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn resolved_manifest_records_defaults_and_overrides() {
    let (dir, manifest) = setup(1, quiet_mock());
    let out = dir.path().join("o");
    ok(&["route", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "42"]);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 42);
    assert_eq!(m["detector"]["mock"]["seed"], 42);
    assert_eq!(m["routing"]["top_k"], 5);
    assert_eq!(m["fusion"]["alpha"], 0.7);
}

#[test]
fn entropy_and_random_arms_spend_the_same_budget() {
    let (dir, manifest) = setup(8, quiet_mock());
    let (e, r) = (dir.path().join("e"), dir.path().join("r"));
    route(&manifest, &e, &["--mode", "entropy"]);
    route(&manifest, &r, &["--mode", "random"]);
    let (re, rr) = (read_json(&e.join("report.json")), read_json(&r.join("report.json")));
    assert!(re["total_crops"].as_u64().unwrap() > 0);
    assert_eq!(re["total_crops"], rr["total_crops"]);
    let k = |v: &Value| -> Vec<Value> {
        v["images"].as_array().unwrap().iter().map(|i| i["k_prime"].clone()).collect()
    };
    assert_eq!(k(&re), k(&rr));
}

#[test]
fn heatmaps_are_byte_stable_across_reruns() {
    let (dir, manifest) = setup(3, quiet_mock());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    route(&manifest, &a, &["--emit-heatmaps"]);
    route(&manifest, &b, &["--emit-heatmaps"]);
    let mut names: Vec<_> =
        fs::read_dir(a.join("heatmaps")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in names {
        let x = fs::read(a.join("heatmaps").join(&n)).unwrap();
        assert!(x.starts_with(b"P5\n640 640\n255\n"));
        assert_eq!(x, fs::read(b.join("heatmaps").join(&n)).unwrap(), "{n:?}");
    }
    assert_eq!(fs::read(a.join("detections.json")).unwrap(), fs::read(b.join("detections.json")).unwrap());
}

#[test]
fn no_heatmaps_without_the_flag() {
    let (dir, manifest) = setup(1, quiet_mock());
    let out = dir.path().join("out");
    route(&manifest, &out, &[]);
    assert!(!out.join("heatmaps").exists());
}

#[test]
fn top_k_sweep_has_four_rows_and_falling_throughput() {
    let (dir, manifest) = setup(6, quiet_mock());
    let rows = ablate(&manifest, &dir.path().join("k"), "top_k=1,3,5,7");
    assert_eq!(rows.len(), 4);
    let fps: Vec<f64> = rows.iter().map(|r| r["fps"].as_f64().unwrap()).collect();
    for w in fps.windows(2) {
        assert!(w[1] <= w[0], "{fps:?}");
    }
    for r in &rows {
        // Reported latencies follow 20 ms (1 + 0.25 K').
        let k = r["mean_k_prime"].as_f64().unwrap();
        let want = 1000.0 / (20.0 * (1.0 + 0.25 * k));
        assert!((r["fps"].as_f64().unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn fusion_switch_sweep_has_two_rows() {
    let (dir, manifest) = setup(3, quiet_mock());
    let rows = ablate(&manifest, &dir.path().join("f"), "fusion_enabled=false,true");
    let values: Vec<&str> = rows.iter().map(|r| r["value"].as_str().unwrap()).collect();
    assert_eq!(values, ["false", "true"]);
    let csv = fs::read_to_string(dir.path().join("f/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn window_threshold_sweep_has_four_rows() {
    let (dir, manifest) = setup(3, quiet_mock());
    let rows = ablate(&manifest, &dir.path().join("t"), "tau_w=0.5,0.6,0.7,0.8");
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["param"] == "tau_w"));
}

#[test]
fn usage_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    for sub in ["route", "bench", "ablate"] {
        let mut args = vec![sub, "--manifest", missing.to_str().unwrap()];
        if sub == "ablate" {
            args.extend(["--sweep", "top_k=1"]);
        }
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{sub}");
        assert!(!out.stderr.is_empty());
    }
    let (_d, manifest) = setup(1, quiet_mock());
    let out = run(&["ablate", "--manifest", manifest.to_str().unwrap(), "--sweep", "gamma=1,2"]);
    assert_eq!(out.status.code(), Some(2));
    for bad in ["tau_w=0.5,1.5", "top_k=three", "scoring_variant=median"] {
        let out = run(&["ablate", "--manifest", manifest.to_str().unwrap(), "--sweep", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
    assert_eq!(run(&["route"]).status.code(), Some(2));
}

#[test]
fn broken_bridge_is_a_backend_failure() {
    let (dir, manifest) = setup(1, json!({"bridge": {"command": "/nonexistent/detector"}}));
    let out = run(&[
        "route",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bench_smoke() {
    let (dir, manifest) = setup(2, quiet_mock());
    let out = dir.path().join("b");
    ok(&[
        "bench",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--warmup",
        "1",
        "--iters",
        "5",
    ]);
    let r = read_json(&out.join("bench.json"));
    assert!(r["fps"].as_f64().unwrap() > 0.0);
    assert_eq!(r["timed_count"], 5);
    assert_eq!(r["warmup_count"], 1);
}

#[test]
fn eval_rescores_stored_detections() {
    let (dir, manifest) = setup(4, quiet_mock());
    let out = dir.path().join("out");
    route(&manifest, &out, &[]);
    let printed: Value = serde_json::from_str(&ok(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--predictions",
        out.join("detections.json").to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(printed, read_json(&out.join("eval.json")));
}

#[test]
fn bridged_mock_matches_in_process_mock() {
    // The bridge child gets the same parameters the in-process run resolves to.
    let params = json!({ "simulate_latency": false, "seed": 11 });
    let bridge = json!({ "bridge": {
        "command": env!("CARGO_BIN_EXE_attnroute"),
        "args": ["mock-bridge", "--params", params.to_string()],
    }});
    let (dir, manifest) = setup(3, bridge);
    let via_bridge = dir.path().join("bridge");
    route(&manifest, &via_bridge, &[]);

    let local = json!({
        "detector": { "mock": params },
        "dataset": "data/manifest.json",
        "output_dir": "local",
        "seed": 11,
    });
    let local_manifest = dir.path().join("local.json");
    fs::write(&local_manifest, local.to_string()).unwrap();
    route(&local_manifest, &dir.path().join("local"), &[]);

    let a = read_json(&via_bridge.join("detections.json"));
    assert_eq!(a, read_json(&dir.path().join("local/detections.json")));
    assert!(a[0]["detections"].as_array().is_some_and(|d| !d.is_empty()));
}
