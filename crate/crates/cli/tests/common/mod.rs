#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_colflux"))
}

/// Runs the binary in `dir` with `COLFLUX_SEED` cleared unless given in `env`.
pub fn colflux(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).args(args).env_remove("COLFLUX_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = colflux(dir, args, &[]);
    assert!(
        out.status.success(),
        "colflux {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Settings that keep every stage of the pipeline to a few seconds.
pub const SMALL_CONFIG: &str =
    r#"{"mpc": {"h": 0.025, "max_iterations": 5, "horizon": 5.0}, "events": 3, "envelope_draws": 10, "bias_draws": 2}"#;

/// Every command on a short sequence; returns the artifact paths relative to `dir`.
pub fn small_pipeline(dir: &Path, workers: &str) -> Vec<&'static str> {
    fs::write(dir.join("cfg.json"), SMALL_CONFIG).unwrap();
    let w = ["--config", "cfg.json", "--workers", workers];
    let run = |args: &[&str]| ok(dir, &[&w[..], args].concat());
    run(&["steady-state", "--out", "ss.csv"]);
    run(&["gen-disturbances", "--seed", "3", "--out", "seq.json"]);
    run(&["region", "--sequence", "seq.json", "--out", "region.csv", "--quantiles", "q.csv", "--traj", "mpc.csv"]);
    run(&["pools", "--region", "region.csv", "--n", "40", "--seed", "4", "--out", "ic.csv", "--noise-out", "noise.csv"]);
    let train = |policy: &str, out: &str| {
        run(&[
            "train", "--policy", policy, "--seed", "5", "--initial", "ic.csv", "--noise", "noise.csv", "--out", out,
            "--record", &format!("{out}.rec.csv"), "--phase-a", "4", "--phase-b", "2", "--horizon", "0.5",
        ])
    };
    train("all", "all.json");
    train("reg", "reg.json");
    run(&["mpc-run", "--sequence", "seq.json", "--out", "mpc_run.csv", "--mismatch"]);
    run(&["evaluate", "--policies", "all.json", "reg.json", "--sequence", "seq.json", "--out", "ev.csv", "--traj-dir", "tr"]);
    run(&["evaluate", "--policies", "all.json", "reg.json", "--sequence", "seq.json", "--mode", "avg-bias", "--out", "ev_avg.csv"]);
    run(&["table4", "--policies", "all.json", "reg.json", "--sequence", "seq.json", "--out", "t4.csv", "--mpc-objective", "0.01"]);
    run(&["plot", "--traj", "tr/all.csv", "--out", "all.svg", "--kind", "controls"]);
    run(&["plot", "--traj", "mpc.csv", "--out", "mpc.svg"]);
    vec![
        "ss.csv", "seq.json", "region.csv", "q.csv", "mpc.csv", "ic.csv", "noise.csv", "all.json", "all.json.rec.csv",
        "reg.json", "reg.json.rec.csv", "mpc_run.csv", "ev.csv", "tr/all.csv", "tr/reg.csv", "ev_avg.csv", "t4.csv",
        "all.svg", "mpc.svg",
    ]
}

/// Manifest with the wall-time field removed.
pub fn manifest_without_time(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_s");
    v
}
