use std::path::Path;
use std::process::{Command, Output};

fn prato(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prato"));
    cmd.args(args).env_remove("PRATO_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_prune_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let manifest = json(&prato(&["synth", "--count", "3", "--size", "64", "--seed", "4", "--out", s(&scenes)], &[]));
    assert_eq!(manifest.as_array().unwrap().len(), 3);
    assert!(scenes.join("manifest.json").exists());
    assert!(scenes.join("scene_0002.truth.csv").exists());

    let image = scenes.join("scene_0000.prti");
    let prompt = scenes.join("scene_0000.box.json");
    let audits = dir.path().join("audits");
    let report = json(&prato(
        &[
            "prune", "--image", s(&image), "--box", s(&prompt), "--patch-size", "8", "--roi-k", "3",
            "--tau-mode", "percentile", "--tau-value", "50", "--audit-dir", s(&audits),
        ],
        &[],
    ));
    assert_eq!(report["Z"], 64);
    assert_eq!(report["retained"], serde_json::json!([32]));
    assert_eq!(report["token_sparsity"], 0.5);
    let audit_files: Vec<_> = std::fs::read_dir(&audits).unwrap().collect();
    assert_eq!(audit_files.len(), 4, "one JSON record and three matrices");
}

#[test]
fn prune_accepts_inline_box_and_csv_planes() {
    let dir = tempfile::tempdir().unwrap();
    let plane = dir.path().join("plane.csv");
    let rows: Vec<String> = (0..32)
        .map(|y| (0..32).map(|x| format!("{}", ((x * 7 + y * 3) % 11) as f64 / 10.0)).collect::<Vec<_>>().join(","))
        .collect();
    std::fs::write(&plane, rows.join("\n")).unwrap();
    let report = json(&prato(
        &[
            "prune", "--image", s(&plane), "--box", r#"{"x1":0.1,"y1":0.2,"x2":0.6,"y2":0.7}"#,
            "--patch-size", "4", "--tau-mode", "fixed", "--tau-value", "0.5",
        ],
        &[],
    ));
    assert_eq!(report["Z"], 64);
}

#[test]
fn prune_rejects_bad_inputs() {
    let out = prato(&["prune", "--image", "/nonexistent.prti", "--box", r#"{"x1":0,"y1":0,"x2":1,"y2":1}"#], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s");
    json(&prato(&["synth", "--size", "32", "--out", s(&scenes)], &[]));
    let image = scenes.join("scene_0000.prti");
    let inverted = prato(&["prune", "--image", s(&image), "--box", r#"{"x1":0.8,"y1":0,"x2":0.2,"y2":1}"#], &[]);
    assert!(!inverted.status.success());
    let bad_tau = prato(
        &["prune", "--image", s(&image), "--box", r#"{"x1":0,"y1":0,"x2":1,"y2":1}"#, "--patch-size", "8", "--tau-mode", "fixed", "--tau-value", "1.5"],
        &[],
    );
    assert!(!bad_tau.status.success());
    let missing_value = prato(&["prune", "--image", s(&image), "--box", "{}", "--tau-mode", "fixed"], &[]);
    assert!(!missing_value.status.success());
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    json(&prato(&["synth", "--size", "32", "--out", s(&a)], &[("PRATO_SEED", "9")]));
    json(&prato(&["synth", "--size", "32", "--seed", "9", "--out", s(&b)], &[]));
    assert_eq!(
        std::fs::read(a.join("scene_0000.prti")).unwrap(),
        std::fs::read(b.join("scene_0000.prti")).unwrap()
    );

    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"patch_size": 8, "seed": 1}"#).unwrap();
    let image = a.join("scene_0000.prti");
    let run = |envs: &[(&str, &str)]| {
        let out = prato(&["prune", "--image", s(&image), "--box", r#"{"x1":0.2,"y1":0.2,"x2":0.7,"y2":0.9}"#, "--config", s(&config), "--audit-dir", s(&dir.path().join("audit"))], envs);
        assert!(out.status.success());
        std::fs::read(dir.path().join("audit").join("stage0_block1.json")).unwrap()
    };
    let from_config = run(&[]);
    let overridden = run(&[("PRATO_SEED", "2")]);
    let explicit = {
        std::fs::write(&config, r#"{"patch_size": 8, "seed": 2}"#).unwrap();
        run(&[])
    };
    assert_ne!(from_config, overridden);
    assert_eq!(overridden, explicit);
}

#[test]
fn sweep_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"policies":[{"mode":"percentile","value":25}],"k_values":[3],"seeds":2,
            "scene":{"size":32},"pipeline":{"patch_size":8,"embed_dim":16,"stage_indices":[0],"prune":{"d_v":16}}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let summary = json(&prato(&["sweep", "--spec", s(&spec), "--out", s(&out)], &[]));
    assert_eq!(summary["cells"], 8);
    assert_eq!(summary["failures"], 0);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(out.join("summary.json").exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"k_values": []}"#).unwrap();
    assert!(!prato(&["sweep", "--spec", s(&bad), "--out", s(&out)], &[]).status.success());
}

#[test]
fn check_passes_and_reports_each_check() {
    let out = prato(&["check"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 10);
    assert!(text.contains("10/10 checks passed"));
}
