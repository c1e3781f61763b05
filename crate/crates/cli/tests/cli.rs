mod common;

use std::fs;

use common::{colflux, manifest_without_time, ok, small_pipeline};
use tempfile::tempdir;

fn stderr_json(out: &std::process::Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{line}: {e}"))
}

#[test]
fn steady_state_prints_product_compositions() {
    let dir = tempdir().unwrap();
    let text = ok(dir.path(), &["steady-state"]);
    let value = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        line.split('=').nth(1).unwrap().trim().parse().unwrap()
    };
    assert!((value("x_1 ") - 0.01).abs() < 0.01);
    assert!((value("x_25 ") - 0.99).abs() < 0.01);
    assert!(value("residual") < 1e-10);
}

#[test]
fn disturbance_files_are_byte_identical() {
    let dir = tempdir().unwrap();
    ok(dir.path(), &["gen-disturbances", "--seed", "7", "--out", "a.json"]);
    ok(dir.path(), &["gen-disturbances", "--seed", "7", "--out", "b.json"]);
    ok(dir.path(), &["gen-disturbances", "--seed", "8", "--out", "c.json"]);
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
    let m = manifest_without_time(&dir.path().join("a.json.manifest.json"));
    assert_eq!(m["command"], "gen-disturbances");
    assert_eq!(m["seeds"]["sequence"], 7);
    assert_eq!(m["artifacts"][0]["path"], "a.json");
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempdir().unwrap();
    ok(dir.path(), &["gen-disturbances", "--seed", "1", "--out", "s.json"]);
    let out = colflux(dir.path(), &["evaluate", "--policies", "nope.json", "--sequence", "s.json", "--out", "e.csv"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
    let out = colflux(dir.path(), &["train", "--policy", "bogus", "--initial", "a", "--noise", "b", "--out", "c"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(colflux(dir.path(), &["--help"], &[]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = colflux(dir.path(), &["region", "--sequence", "bad.json", "--out", "r.csv"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "runtime");
    assert!(err["message"].as_str().unwrap().contains("bad.json"));
}

#[test]
fn seed_precedence_is_flag_then_file_then_env_then_default() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"seed": 6}"#).unwrap();
    let seed_of = |args: &[&str], env: &[(&str, &str)]| {
        let out = colflux(d, args, env);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        manifest_without_time(&d.join("s.json.manifest.json"))["config"]["seed"].as_u64().unwrap()
    };
    let gen = ["gen-disturbances", "--out", "s.json"];
    assert_eq!(seed_of(&gen, &[]), 1);
    assert_eq!(seed_of(&gen, &[("COLFLUX_SEED", "5")]), 5);
    let with_cfg = [&["--config", "cfg.json"][..], &gen[..]].concat();
    assert_eq!(seed_of(&with_cfg, &[("COLFLUX_SEED", "5")]), 6);
    let with_flag = [&with_cfg[..], &["--seed", "7"][..]].concat();
    assert_eq!(seed_of(&with_flag, &[("COLFLUX_SEED", "5")]), 7);
    let out = colflux(d, &gen, &[("COLFLUX_SEED", "x")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_pipeline_is_reproducible_across_worker_counts() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let files = small_pipeline(a.path(), "1");
    small_pipeline(b.path(), "4");
    for f in files {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
        let m = format!("{f}.manifest.json");
        if a.path().join(&m).exists() {
            assert_eq!(manifest_without_time(&a.path().join(&m)), manifest_without_time(&b.path().join(&m)), "{m}");
        }
    }
    let svg = fs::read_to_string(a.path().join("all.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("class=\"envelope\""));
    let svg = fs::read_to_string(a.path().join("mpc.svg")).unwrap();
    assert!(svg.contains("class=\"boiling\"") && !svg.contains("envelope"));
    let summary = fs::read_to_string(a.path().join("ev.csv")).unwrap();
    assert!(summary.starts_with("policy,mode,objective,envelope_width\nall,nominal,"));
    let m = manifest_without_time(&a.path().join("reg.json.manifest.json"));
    assert_eq!(m["results"]["phase_a_iterations"], 6);
    assert_eq!(m["results"]["iterations"], 12);
}
