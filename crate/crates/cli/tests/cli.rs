use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hsde::datagen::Truth;
use hsde::inducing::{MarkModel, WaitingTimeModel};
use hsde::sde::NoiseParams;
use hsde::{GaussianObsModel, InitialState, ModelParams, ObsModel};
use nalgebra::DMatrix;
use serde_json::{json, Value};

fn hsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsde")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let out = hsde(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn simulate_chirp(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("chirp{seed}"));
    let cfg = json!({
        "schema": 1, "seed": seed, "out": out,
        "generator": { "kind": "chirp", "duration": 250, "sample_rate": 2, "noise_var": 0.1 }
    });
    let c = write_config(dir, &format!("sim{seed}.json"), &cfg);
    run_ok(&["simulate", "--config", c.to_str().unwrap()]);
    out
}

#[test]
fn chirp_simulation_has_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate_chirp(dir.path(), 1);
    let text = std::fs::read_to_string(out.join("obs.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,z1"));
    assert_eq!(lines.count(), 500);
    let truth = Truth::from_json(&std::fs::read_to_string(out.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth.times.len(), 500);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate_chirp(dir.path(), 3);
    let b = dir.path().join("again");
    let c = write_config(
        dir.path(),
        "again.json",
        &json!({ "schema": 1, "seed": 3, "out": b, "generator": { "kind": "chirp", "duration": 250, "sample_rate": 2, "noise_var": 0.1 } }),
    );
    run_ok(&["simulate", "--config", c.to_str().unwrap()]);
    for f in ["obs.csv", "truth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let other = simulate_chirp(dir.path(), 4);
    assert_ne!(std::fs::read(a.join("obs.csv")).unwrap(), std::fs::read(other.join("obs.csv")).unwrap());
}

fn tiny_noise_params() -> ModelParams<f64> {
    let mut p = ModelParams::new(
        ObsModel::Gaussian(
            GaussianObsModel::new(DMatrix::from_row_slice(2, 1, &[2.0, -1.0]), DMatrix::identity(2, 2) * 1e-300)
                .unwrap(),
        ),
        NoiseParams::uniform(1, 0.5, 0.1),
        WaitingTimeModel::from_mean_std(3.0, 1.0).unwrap(),
        MarkModel::isotropic(1, 0.0, 1.0).unwrap(),
    )
    .unwrap();
    p.initial = InitialState::isotropic(1, 1.0, 1.0);
    p
}

#[test]
fn model_draw_without_noise_is_the_loaded_latent() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny_noise_params();
    let params: Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
    let out = dir.path().join("model");
    let c = write_config(
        dir.path(),
        "model.json",
        &json!({ "schema": 1, "out": out, "generator": { "kind": "model", "params": params, "steps": 300, "dt": 0.1, "seed": 5 } }),
    );
    run_ok(&["simulate", "--config", c.to_str().unwrap()]);
    let truth = Truth::from_json(&std::fs::read_to_string(out.join("truth.json")).unwrap()).unwrap();
    let mut rdr = csv::Reader::from_path(out.join("obs.csv")).unwrap();
    let rows: Vec<Vec<f64>> = rdr.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 300);
    for (row, y) in rows.iter().zip(&truth.latent) {
        for (j, w) in [2.0, -1.0].iter().enumerate() {
            assert!((row[j + 1] - w * y[0]).abs() <= 1e-12 * (1.0 + y[0].abs()));
        }
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(
        dir.path(),
        "bad.json",
        &json!({ "schema": 1, "generator": { "kind": "chirp", "duration": 10, "sampel_rate": 2 } }),
    );
    let out = hsde(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sampel_rate"));

    let schema = write_config(dir.path(), "schema.json", &json!({ "schema": 2, "generator": { "kind": "chirp" } }));
    assert_eq!(hsde(&["simulate", "--config", schema.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    assert_eq!(hsde(&["fit", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let no_data = write_config(
        dir.path(),
        "fit.json",
        &json!({ "schema": 1, "data": [{ "format": "csv", "path": dir.path().join("absent.csv") }] }),
    );
    assert_eq!(hsde(&["fit", "--config", no_data.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn numerical_collapse_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = tiny_noise_params();
    p.obs = ObsModel::Gaussian(
        GaussianObsModel::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1e-300)).unwrap(),
    );
    p.noise = NoiseParams::uniform(1, 0.0, 0.0);
    p.initial = InitialState::isotropic(1, 0.0, 0.0);
    let params = dir.path().join("params.json");
    std::fs::write(&params, p.to_json().unwrap()).unwrap();
    let data = dir.path().join("obs.csv");
    std::fs::write(&data, "t,z1\n0.1,1000000\n0.2,0\n0.3,0\n").unwrap();
    let out_dir = dir.path().join("fit");
    let c = write_config(
        dir.path(),
        "fit.json",
        &json!({
            "schema": 1, "out": out_dir,
            "data": [{ "format": "csv", "path": data }],
            "init": { "params_file": params },
            "em": { "iterations": 2, "smc": { "particles": 10 } }
        }),
    );
    let out = hsde(&["fit", "--config", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let trace: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("trace.json")).unwrap()).unwrap();
    assert!(trace["failure"].is_string());
}

fn fit_config(dir: &Path, data: &Path, out: &Path, params: Option<&Path>) -> PathBuf {
    let init = match params {
        Some(p) => json!({ "params_file": p }),
        None => json!({ "waiting_mean": 40, "waiting_std": 8.94 }),
    };
    write_config(
        dir,
        "fit.json",
        &json!({
            "schema": 1, "seed": 9, "out": out,
            "data": [{ "format": "csv", "path": data }],
            "init": init,
            "em": { "iterations": 3, "smc": { "particles": 200 } }
        }),
    )
}

#[test]
fn inference_only_run_keeps_the_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_chirp(dir.path(), 2);
    let first = dir.path().join("first");
    let c = fit_config(dir.path(), &sim.join("obs.csv"), &first, None);
    run_ok(&["fit", "--config", c.to_str().unwrap(), "--iters", "1"]);
    for f in ["params.json", "trace.json", "summary.csv", "summary_x.csv", "prediction.csv", "events.json"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let second = dir.path().join("second");
    let c = fit_config(dir.path(), &sim.join("obs.csv"), &second, Some(&first.join("params.json")));
    run_ok(&["fit", "--config", c.to_str().unwrap(), "--iters", "1", "--no-update-all"]);
    assert_eq!(
        std::fs::read_to_string(first.join("params.json")).unwrap(),
        std::fs::read_to_string(second.join("params.json")).unwrap()
    );
    let trace: Value = serde_json::from_str(&std::fs::read_to_string(second.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["iterations"].as_array().unwrap().len(), 1);
}

#[test]
fn fit_output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_chirp(dir.path(), 6);
    let (a, b) = (dir.path().join("t1"), dir.path().join("t4"));
    let c = fit_config(dir.path(), &sim.join("obs.csv"), &a, None);
    run_ok(&["fit", "--config", c.to_str().unwrap(), "--threads", "1"]);
    run_ok(&["fit", "--config", c.to_str().unwrap(), "--threads", "4", "--out", b.to_str().unwrap()]);
    for f in ["params.json", "trace.json", "summary.csv", "prediction.csv", "events.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_chirp(dir.path(), 8);
    let out = dir.path().join("metrics.json");
    let c = write_config(
        dir.path(),
        "eval.json",
        &json!({
            "schema": 1,
            "truth": { "path": sim.join("truth.json"), "field": "clean" },
            "estimate": { "path": sim.join("truth.json"), "field": "clean" },
            "out": out
        }),
    );
    let stdout = run_ok(&["eval", "--config", c.to_str().unwrap()]).stdout;
    let m: Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(m["mse"].as_f64(), Some(0.0));
    assert!((m["r2"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(out.exists());
}

#[test]
fn help_lists_the_config_keys() {
    let help = |cmd: &str| String::from_utf8(run_ok(&[cmd, "--help"]).stdout).unwrap();
    let fit = help("fit");
    for key in ["em", "smc.particles", "waiting_mean", "min_spikes", "--no-update-all", "--iters"] {
        assert!(fit.contains(key), "fit help lacks {key}");
    }
    assert!(help("simulate").contains("generator"));
    assert!(help("eval").contains("truth"));
    assert!(help("bench").contains("gp_sizes"));
    let top = String::from_utf8(run_ok(&["--help"]).stdout).unwrap();
    assert!(top.contains("Exit codes"));
}
