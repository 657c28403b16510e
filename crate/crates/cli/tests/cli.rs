//! Exit codes and overrides of the `dscm` binary.

use std::process::Command;

use clap::Parser;
use dscm_cli::{parse_assignments, Cli};

fn dscm(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dscm")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    assert_eq!(dscm(&["no-such-command"]).0, 1);
    assert_eq!(dscm(&["--out", out, "--set", "data.size=12", "generate-data"]).0, 1);
    assert_eq!(dscm(&["--out", out, "--set", "hvae.nope=1", "train-flows"]).0, 1);

    let (code, err) = dscm(&["--out", out, "train-flows"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("data"), "{err}");

    let config = dir.path().join("missing.toml");
    assert_eq!(dscm(&["--config", config.to_str().unwrap(), "run"]).0, 2);

    std::fs::write(dir.path().join(".lock"), "held").unwrap();
    let (code, err) = dscm(&["--out", out, "generate-data"]);
    assert_eq!(code, 2);
    assert!(err.contains(".lock"), "{err}");
}

#[test]
fn flags_become_recorded_overrides() {
    let cli = Cli::try_parse_from(["dscm", "--seed", "7", "--out", "/tmp/x y", "--set", "cft.steps=5", "run"]).unwrap();
    let p = cli.pipeline().unwrap();
    assert_eq!(p.config.seed, 7);
    assert_eq!(p.config.cft.steps, 5);
    assert_eq!(p.config.out.to_str(), Some("/tmp/x y"));
    assert_eq!(p.overrides, ["cft.steps=5", "seed=7", "out=\"/tmp/x y\""]);

    // The output root does not enter the hash.
    let other = Cli::try_parse_from(["dscm", "--seed", "7", "--out", "/elsewhere", "--set", "cft.steps=5", "run"]).unwrap();
    assert_eq!(other.pipeline().unwrap().config_hash, p.config_hash);
}

#[test]
fn assignment_parsing() {
    let iv = parse_assignments(&["left=120.5".into(), " center = 40 ".into()]).unwrap();
    assert_eq!(iv.assignments["left"], 120.5);
    assert_eq!(iv.assignments["center"], 40.0);
    assert!(parse_assignments(&["left".into()]).is_err());
    assert!(parse_assignments(&["left=big".into()]).is_err());
}
