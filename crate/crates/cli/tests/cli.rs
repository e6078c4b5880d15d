use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cpal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpal"))
        .args(args)
        .output()
        .expect("spawn cpal")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let text = r#"{
  "dataset": "data/manifest.json",
  "spec": {"images": 12, "height": 12, "width": 12, "blob_min": 3, "blob_max": 6, "seed": 3},
  "run": {"epochs": 2, "batch_size": 4, "n_p": 4, "k": 3, "kmeans_restarts": 2}
}"#;
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn gen(dir: &Path) -> String {
    let cfg = small_config(dir);
    let data = dir.join("data");
    let o = cpal(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    cfg
}

#[test]
fn gen_run_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = gen(tmp.path());
    assert!(tmp.path().join("data/manifest.json").exists());

    let out = tmp.path().join("run");
    let o = cpal(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("pacam/manifest.json").exists());
    assert!(out.join("candidates/index.json").exists());

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["tool"], "cpal");
    assert_eq!(report["config"]["epochs"], 2);
    let run_miou = report["variants"][1]["best_miou"].as_f64().unwrap();

    let maps = out.join("pacam/manifest.json");
    let o = cpal(&["eval", "--config", &cfg, "--maps", maps.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let scored: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(scored["best_miou"].as_f64().unwrap(), run_miou);
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = gen(tmp.path());
    let out = tmp.path().join("run");
    let o = cpal(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--tau",
        "0.2",
        "--metric",
        "cosine",
        "--mode",
        "uniform",
        "--epochs",
        "1",
        "--include-background",
        "false",
        "--l1-pixel-sum",
        "--bank-size",
        "50",
        "--gamma",
        "0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let c = &report["config"];
    assert_eq!(c["tau"], 0.2);
    assert_eq!(c["metric"], "cosine");
    assert_eq!(c["aggregation_mode"], "uniform");
    assert_eq!(c["epochs"], 1);
    assert_eq!(c["include_background"], false);
    assert_eq!(c["pixel_reduction"], "sum");
    assert_eq!(c["bank_capacity"], 50);
    assert_eq!(c["gamma"], 0.5);
}

#[test]
fn ablate_writes_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = gen(tmp.path());
    let out = tmp.path().join("ablate");
    let o = cpal(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["raw-cam", "vanilla", "+top-k", "+positiveness", "+alignment"]);
    assert_eq!(report["k_sweep"].as_array().unwrap().len(), 3);
}

#[test]
fn grad_check_passes_and_corruption_fails() {
    let o = cpal(&["grad-check", "--trials", "6", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);

    let o = cpal(&["grad-check", "--trials", "2", "--corrupt"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn validation_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = gen(tmp.path());
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(code(&cpal(&["run", "--config", &cfg, "--out", out, "--tau", "1.5"])), 1);
    assert_eq!(code(&cpal(&["run", "--config", &cfg, "--out", out, "--metric", "manhattan"])), 1);
    assert_eq!(code(&cpal(&["run", "--config", &cfg, "--out", out, "--mode", "max"])), 1);
    assert_eq!(code(&cpal(&["run", "--config", &cfg])), 1);
    assert_eq!(code(&cpal(&["frobnicate"])), 1);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"run": {"taus": 0.1}}"#).unwrap();
    assert_eq!(code(&cpal(&["run", "--config", bad.to_str().unwrap(), "--out", out])), 1);

    let broken = tmp.path().join("data/features/img_0000.npy");
    fs::write(&broken, b"\x93NUMPY not really").unwrap();
    assert_eq!(code(&cpal(&["run", "--config", &cfg, "--out", out])), 1);
}

#[test]
fn io_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope/manifest.json");
    let out = tmp.path().join("x");
    let o = cpal(&["run", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = cpal(&["run", "--config", tmp.path().join("absent.json").to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&cpal(&["--help"])), 0);
    assert_eq!(code(&cpal(&["--version"])), 0);
    let o = cpal(&["run", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--config",
        "--out",
        "--tau",
        "--np",
        "--k",
        "--bank-size",
        "--gamma",
        "--metric",
        "--mode",
        "--epochs",
        "--batch-size",
        "--seed",
        "--include-background",
        "--l1-pixel-sum",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
}
