use std::path::Path;
use std::process::{Command, Output};

fn gem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gem")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(
        p("c.json"),
        r#"{"data": {"size": 30}, "model": {"hidden": 6, "layers": 1},
            "training": {"steps": 8, "n_warmup": 4, "n_cl": 4, "batch_size": 8, "calibration_samples": 8},
            "sampler": {"chains": 4, "steps": 10},
            "calibration": {"chains": 2, "steps": 5, "beta_mh": [1.0, 4.0], "beta_l": [2.0], "lambda_v": [0.23], "lambda_e": [1.88]},
            "guidance": {"lambdas": [0.0, 1.0], "regressor": {"steps": 5, "hidden": 4, "layers": 1}},
            "geodesic": {"pairs": 2, "iterations": 3, "points": 4, "locations": 3, "samples_per_location": 2}}"#,
    )
    .unwrap();
    let c = p("c.json");
    let (data, model) = (p("d.jsonl"), p("m.json"));
    let ok = |args: &[&str]| {
        let o = gem(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    ok(&["gen-data", "-c", s(&c), "--out", s(&data)]);
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 30);
    ok(&["train", "-c", s(&c), "--data", s(&data), "--out", s(&model), "--history", s(&p("h.csv"))]);
    let hist = std::fs::read_to_string(p("h.csv")).unwrap();
    assert!(hist.starts_with("step,flow_loss,cl_loss,V_th,mean_neg_energy"));
    assert_eq!(hist.lines().count(), 9);
    ok(&["calibrate", "-c", s(&c), "--model", s(&model), "--data", s(&data), "--out", s(&p("cal.csv"))]);
    assert_eq!(std::fs::read_to_string(p("cal.csv")).unwrap().lines().count(), 3);
    let sample = |out: &str| {
        ok(&[
            "sample", "-c", s(&c), "--model", s(&model), "--data", s(&data), "--out", s(&p(out)), "--trace",
            s(&p("t.csv")), "--seed", "4",
        ]);
        std::fs::read(p(out)).unwrap()
    };
    assert_eq!(sample("s1.jsonl"), sample("s2.jsonl"));
    let trace = std::fs::read_to_string(p("t.csv")).unwrap();
    assert!(trace.starts_with("chain,step,regime,energy,accepted,alpha"));
    assert_eq!(trace.lines().count(), 1 + 4 * 10);
    let eval = ok(&["evaluate", "-c", s(&c), "--samples", s(&p("s1.jsonl")), "--data", s(&data)]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(v["samples"], 4);
    ok(&["guide", "-c", s(&c), "--model", s(&model), "--data", s(&data), "--out", s(&p("g.csv"))]);
    assert_eq!(std::fs::read_to_string(p("g.csv")).unwrap().lines().count(), 3);
    ok(&["geodesic", "-c", s(&c), "--model", s(&model), "--data", s(&data), "--out", s(&p("geo.csv"))]);
    let geo = std::fs::read_to_string(p("geo.csv")).unwrap();
    assert!(geo.starts_with("pair,method,bin,distance,validity,energy"));
    assert_eq!(geo.lines().count(), 5);
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gem(&["no-such-command"])), 1);
    assert_eq!(code(&gem(&["sample", "--model", "/nonexistent.json", "--data", "x", "--out", "y"])), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"hidden": 0}}"#).unwrap();
    assert_eq!(code(&gem(&["gen-data", "-c", s(&bad), "--out", s(&dir.path().join("d"))])), 1);
    std::fs::write(&bad, "{").unwrap();
    assert_eq!(code(&gem(&["gen-data", "-c", s(&bad), "--out", s(&dir.path().join("d"))])), 1);
    assert_eq!(code(&gem(&["oracle-check"])), 1);
    assert_eq!(code(&gem(&["--help"])), 0);
}

#[test]
fn oracle_check_reports_tv() {
    let o = gem(&["oracle-check", "--tiny", "--steps", "200000"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("TV "), "{out}");
    // a tolerance no finite chain can meet is a runtime failure
    assert_eq!(code(&gem(&["oracle-check", "--tiny", "--steps", "1000", "--tolerance", "0"])), 2);
}
