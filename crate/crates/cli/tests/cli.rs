use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ovseg3d"));
    c.env_remove("OVSEG3D_BUNDLE_ROOT");
    c
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn validate_fixture_succeeds_with_json_report() {
    let out = run(bin().args(["validate", "--json"]).arg(fixtures().join("clean-small")));
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
}

#[test]
fn relative_bundle_paths_resolve_against_the_env_root() {
    let out = run(bin().env("OVSEG3D_BUNDLE_ROOT", fixtures()).args(["validate", "noisy-small"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_bundle_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    assert_eq!(code(&run(bin().args(["synth", "--small", "--cameras", "3", "--out"]).arg(&bundle))), 0);
    std::fs::write(bundle.join("superpoints.bin"), b"oops").unwrap();

    let out = run(bin().args(["validate", "--json"]).arg(&bundle));
    assert_eq!(code(&out), 2);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["violations"][0]["file"], "superpoints.bin");

    let out = run(bin().arg("run").arg(&bundle).arg("--out").arg(dir.path().join("run")));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("superpoints.bin"));
}

#[test]
fn bad_configuration_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .arg("run")
        .arg(fixtures().join("clean-small"))
        .args(["--tau-merge", "3.0", "--out"])
        .arg(dir.path()));
    assert_eq!(code(&out), 2);
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .arg("eval")
        .arg(fixtures().join("clean-small"))
        .arg("--run")
        .arg(dir.path().join("missing")));
    assert_eq!(code(&out), 3);
}

#[test]
fn run_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let ply = dir.path().join("run.ply");
    let out = run(bin()
        .arg("run")
        .arg(fixtures().join("clean-small"))
        .arg("--out")
        .arg(&run_dir)
        .arg("--ply")
        .arg(&ply));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["proposals.json", "predictions.json", "sms.json", "summary.json", "views.json", "config.toml", "timings.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert!(std::fs::read_to_string(&ply).unwrap().starts_with("ply\n"));

    let out = run(bin().arg("eval").arg(fixtures().join("clean-small")).arg("--run").arg(&run_dir).args(["--class-agnostic", "--json"]));
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["report"]["mean"]["ap50"].as_f64().unwrap() > 0.9);

    let groups = dir.path().join("groups.json");
    std::fs::write(&groups, r#"{"all": [], "none": []}"#).unwrap();
    let out = run(bin().arg("eval").arg(fixtures().join("clean-small")).arg("--run").arg(&run_dir).arg("--groups").arg(&groups));
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("class\tnum_gt\tAP"));
    assert!(text.contains("group none: absent"));

    for by in ["proposals", "predictions", "ground-truth"] {
        let target = dir.path().join(format!("{by}.ply"));
        let out = run(bin()
            .arg("export-view")
            .arg(fixtures().join("clean-small"))
            .arg("--run")
            .arg(&run_dir)
            .args(["--by", by, "--out"])
            .arg(&target));
        assert_eq!(code(&out), 0, "{by}");
        assert!(target.exists());
    }
}

#[test]
fn synth_from_spec_reproduces_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().arg("synth").arg("--spec").arg(fixtures().join("noisy-small.toml")).arg("--out").arg(dir.path()));
    assert_eq!(code(&out), 0);
    let a = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let b = std::fs::read(fixtures().join("noisy-small/manifest.json")).unwrap();
    assert_eq!(a, b);
}
