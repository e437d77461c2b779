use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use panelqr::prelim::CoefficientPath;
use rand::Rng;

fn panelqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelqr")).args(args).output().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(out.stderr.trim_ascii()).expect("stderr holds one JSON error report")
}

/// Subjects `a`, `b` with slope 1 and `c`, `d` with slope 4, `T = 60`.
fn toy_panel(path: &Path) {
    let mut rng = panelqr::simlab::stream(3, 0, 0);
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["firm", "month", "ret", "size", "vix"]).unwrap();
    let z: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
    for (id, slope) in [("a", 1.0), ("b", 1.0), ("c", 4.0), ("d", 4.0)] {
        for (t, zt) in z.iter().enumerate() {
            let x: f64 = rng.random_range(-1.0..1.0);
            let e: f64 = rng.random_range(-0.1..0.1);
            let y = slope * x + 0.3 * zt + e;
            w.write_record([id.to_string(), (t + 1).to_string(), y.to_string(), x.to_string(), zt.to_string()])
                .unwrap();
        }
    }
    w.flush().unwrap();
}

const SCHEMA: &str = "y=ret,x=size,z=vix,id=firm,t=month";

fn membership(path: &Path) -> Vec<(String, usize)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| {
        let rec = rec.unwrap();
        (rec[0].to_string(), rec[1].parse().unwrap())
    })
    .collect()
}

#[test]
fn toy_panel_splits_into_two_groups() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    toy_panel(&input);
    let out = dir.path().join("out");
    let res = panelqr(&["estimate", "--input", input.to_str().unwrap(), "--schema", SCHEMA, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let m = membership(&out.join("membership.csv"));
    let labels: Vec<usize> = m.iter().map(|(_, g)| *g).collect();
    assert_eq!(labels, vec![1, 1, 2, 2]);
    for f in ["distances.csv", "dendrogram.csv", "group_number.csv", "bandwidths.csv", "groups/group_1.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    // written paths load back with the library reader
    let p = CoefficientPath::read_csv(out.join("paths/subject_0001.csv"), 0.1, 0.5).unwrap();
    assert_eq!(p.dim_x, 1);
    assert!(p.len() >= 60);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rmax"], 5);
    assert_eq!(manifest["command"], "estimate");
}

#[test]
fn group_only_skips_group_fits() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    toy_panel(&input);
    let out = dir.path().join("out");
    let res = panelqr(&["group-only", "--input", input.to_str().unwrap(), "--schema", SCHEMA, "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    assert!(out.join("membership.csv").exists());
    assert!(!out.join("groups").exists());
}

#[test]
fn tau_list_gives_one_directory_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    toy_panel(&input);
    let out = dir.path().join("out");
    let res = panelqr(&[
        "group-only", "--input", input.to_str().unwrap(), "--schema", SCHEMA, "--tau", "0.25,0.5,0.75", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    for tau in ["0.25", "0.5", "0.75"] {
        assert!(out.join(format!("tau_{tau}")).join("membership.csv").exists());
    }
}

#[test]
fn missing_input_is_a_usage_error() {
    let res = panelqr(&["estimate", "--schema", SCHEMA]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_json(&res)["error"]["kind"], "usage");
}

#[test]
fn unknown_error_distribution_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = panelqr(&["simulate", "--errors", "cauchy", "--reps", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_json(&res)["error"]["kind"], "usage");
}

#[test]
fn unreadable_input_is_a_runtime_error() {
    let res = panelqr(&["estimate", "--input", "/nonexistent/panel.csv"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr_json(&res)["error"]["message"].is_string());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    toy_panel(&input);
    let out = dir.path().join("out");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("# toy run\ninput = {}\nschema = {SCHEMA}\nrmax = 3\ntau = 0.25\nout = {}\n", input.display(), out.display()),
    )
    .unwrap();
    let res = panelqr(&["--config", cfg.to_str().unwrap(), "group-only", "--tau", "0.5"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rmax"], 3);
    let results = manifest["results"].as_array().unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0]["tau"], 0.5);
}

#[test]
fn single_replication_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let res = panelqr(&["simulate", "--n", "50", "--t", "50", "--reps", "1", "--seed", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let records = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 2);
    assert!(dir.path().join("summary.csv").exists());
}
