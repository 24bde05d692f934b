use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn matforge(args: &[&str], out: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_matforge"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn scheduler_dump_prints_single_step_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = matforge(&["scheduler-dump", "--steps", "1"], dir.path());
    let dump: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(dump["timesteps"], serde_json::json!([999]));
    let ab = dump["alpha_bar"][0].as_f64().unwrap();
    assert!(ab > 0.0 && ab < 0.01, "{ab}");
    assert_eq!(manifest(dir.path())["files"][0]["role"], "report");
}

#[test]
fn oracle_decompose_writes_every_role() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"pipeline": {"view_resolution": 48, "atlas_resolution": 64}}"#).unwrap();
    let out = dir.path().join("run");
    matforge(
        &["decompose", "--decomposer", "oracle", "--shape", "torus", "--config", config.to_str().unwrap()],
        &out,
    );
    let m = manifest(&out);
    let roles: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f["role"].as_str().unwrap()).collect();
    for role in ["albedo", "rm", "mask", "position", "report"] {
        assert!(roles.contains(&role), "{roles:?}");
    }
    for f in m["files"].as_array().unwrap() {
        assert!(out.join(f["file"].as_str().unwrap()).exists());
    }
}

#[test]
fn metrics_of_identical_renders_are_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let renders = dir.path().join("renders");
    matforge(&["render", "--shape", "quad", "--texture-size", "32", "--resolution", "24", "--env-height", "16"], &renders);
    let out = matforge(
        &["metrics", renders.to_str().unwrap(), renders.to_str().unwrap()],
        &dir.path().join("metrics"),
    );
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 12);
    assert_eq!(report["psnr"], 99.0);
    assert_eq!(report["l1"], 0.0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"pipline": {}}"#).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_matforge"))
        .args(["scheduler-dump", "--config", config.to_str().unwrap(), "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("pipline"));
}
