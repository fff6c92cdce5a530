use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dastr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dastr")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Shrinks the smoke config so a run takes a few seconds.
const SMALL: &[&str] = &["--set", "dastr.N_e=5", "--set", "eval.curve_points=500"];

#[test]
fn two_stage_run_writes_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = config("brownian20-smoke.toml");
    let o = dastr(&[
        "run",
        cfg.to_str().unwrap(),
        "--set",
        "dastr.N_adaptive=2",
        "--set",
        &format!("output_dir=\"{}\"", out.display()),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(text(&o.stderr).contains("stage 1:"));
    for f in ["manifest.json", "summary.json", "timing.csv", "samples.csv", "checkpoints/net-stage1.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["dastr"]["N_adaptive"], 2);
    assert!(!manifest["build_id"].as_str().unwrap().is_empty());

    let r = dastr(&["report", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", text(&r.stderr));
    assert!(text(&r.stdout).contains("1 run(s) of brownian20"));
}

#[test]
fn identical_seed_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("brownian20-smoke.toml");
    let mut files = Vec::new();
    for (tag, threads) in [("a", "0"), ("b", "2")] {
        let out = tmp.path().join(tag);
        let mut args = vec!["run", cfg.to_str().unwrap(), "-q", "--set", "dastr.N_adaptive=2"];
        let dir = format!("output_dir=\"{}\"", out.display());
        let th = format!("threads={threads}");
        args.extend(["--set", &dir, "--set", &th]);
        args.extend(SMALL);
        let o = dastr(&args);
        assert!(o.status.success(), "{}", text(&o.stderr));
        files.push((std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("summary.json")).unwrap()));
    }
    assert_eq!(files[0], files[1]);

    // rerunning from the manifest reproduces the run in a fresh directory
    let c = tmp.path().join("c");
    let manifest = tmp.path().join("a").join("manifest.json");
    let dir = format!("output_dir=\"{}\"", c.display());
    let o = dastr(&["run", manifest.to_str().unwrap(), "-q", "--set", &dir]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(std::fs::read(c.join("metrics.csv")).unwrap(), files[0].0);
}

#[test]
fn missing_potential_id_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(config("brownian20-smoke.toml")).unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, src.replace("id = \"brownian-annulus\"\n", "")).unwrap();
    let o = dastr(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("potential") && err.contains("`id`"), "{err}");

    let o = dastr(&["run", config("brownian20-smoke.toml").to_str().unwrap(), "--set", "dastr.N_e=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("dastr.N_e"), "{}", text(&o.stderr));
}

#[test]
fn runtime_failure_exits_1_naming_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("rugged-mueller-latent2.toml");
    let out = tmp.path().join("run");
    let dir = format!("output_dir=\"{}\"", out.display());
    // an energy threshold below every decoded point fails the first refinement
    let mut args = vec![
        "run", cfg.to_str().unwrap(), "-q", "--set", &dir, "--set", "sampler.threshold=-1000",
        "--set", "dastr.N_0=1000", "--set", "sampler.autoencoder.epochs=2", "--set", "sampler.N_e_prime=1",
    ];
    args.extend(["--set", "dastr.N_e=1", "--set", "dastr.N_adaptive=2"]);
    let o = dastr(&args);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o.stderr));
    let err = text(&o.stderr);
    assert!(err.contains("stage 0") && err.contains("energy filter kept"), "{err}");
}

#[test]
fn report_needs_a_manifest_and_selftest_lists_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dastr(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("manifest.json"));

    let o = dastr(&["selftest", "--list"]);
    assert!(o.status.success());
    assert!(text(&o.stdout).contains("flow-invertibility"));
    let o = dastr(&["selftest", "no-such-check"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dastr(&["selftest", "metadynamics-bias"]);
    assert!(o.status.success(), "{}", text(&o.stdout));
    assert!(text(&o.stdout).starts_with("PASS metadynamics-bias"));
}
