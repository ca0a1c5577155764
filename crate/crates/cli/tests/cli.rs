use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn wadc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wadc"))
        .args(args)
        .output()
        .expect("run wadc")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = wadc(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("pipeline"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = wadc(&["simulate", "--bogus"]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn missing_config_exits_two() {
    let out = wadc(&["pipeline", "--config", "/nonexistent/config.toml"]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr_json(&out)["exit_code"], 2);
}

#[test]
fn invalid_case_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(repo_root().join("cases/two_machine.toml"))
        .unwrap()
        .replace("M = [0.1, 0.1]", "M = [0.1, -0.1]");
    std::fs::write(&case, text).unwrap();
    let out = wadc(&["simulate", "--case", s(&case), "--out", s(&dir.path().join("t.csv")), "--duration", "1"]);
    assert_eq!(code(&out), 2);
    let err = stderr_json(&out);
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("M[2]"));
    assert!(!dir.path().join("t.csv").exists());
}

#[test]
fn constant_window_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flat.csv");
    let mut text = String::from("t,delta_1,delta_2,omega_1,omega_2\n");
    for k in 0..50 {
        text.push_str(&format!("{},0.1,0.2,376.99111843077515,376.99111843077515\n", k as f64 * 0.05));
    }
    std::fs::write(&csv, text).unwrap();
    let out = wadc(&[
        "estimate",
        "--pmu",
        s(&csv),
        "--case",
        s(&repo_root().join("cases/two_machine.toml")),
        "--out",
        s(&dir.path().join("model.json")),
    ]);
    assert_eq!(code(&out), 3);
    assert_eq!(stderr_json(&out)["error"], "degenerate_window");
}

#[test]
fn full_chain_and_zero_shift_plan() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let case = repo_root().join("cases/ten_machine.toml");
    let ok = |args: &[&str]| {
        let out = wadc(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["simulate", "--case", s(&case), "--out", s(&p("traj.csv")), "--seed", "3", "--duration", "200"]);
    ok(&["pmu", "--in", s(&p("traj.csv")), "--rate", "20", "--noise-angle", "1e-3", "--noise-speed", "1e-6", "--out", s(&p("pmu.csv"))]);
    let rows = std::fs::read_to_string(p("pmu.csv")).unwrap().lines().count();
    assert_eq!(rows, 4002);
    ok(&["estimate", "--pmu", s(&p("pmu.csv")), "--case", s(&case), "--out", s(&p("model.json"))]);
    ok(&["modal", "--model", s(&p("model.json")), "--out", s(&p("modes.json")), "--csv", s(&p("modes.csv"))]);
    let modes = read_json(&p("modes.json"));
    let records = modes["modes"].as_array().unwrap();
    assert_eq!(records.len(), 9);
    assert_eq!(records[0]["index"], 1);
    assert!(records[0]["weak"].as_bool().unwrap());
    assert!(std::fs::read_to_string(p("modes.csv")).unwrap().lines().count() > 9);

    ok(&["design", "--model", s(&p("model.json")), "--mode", "weakest", "--shift", "2", "--actuators", "top3", "--out", s(&p("plan.json"))]);
    let plan = read_json(&p("plan.json"));
    assert_eq!(plan["actuators"].as_array().unwrap().len(), 3);
    ok(&[
        "evaluate",
        "--plan",
        s(&p("plan.json")),
        "--model",
        s(&p("model.json")),
        "--truth",
        s(&case),
        "--out",
        s(&p("eval.json")),
        "--table",
        s(&p("table.csv")),
    ]);
    let eval = read_json(&p("eval.json"));
    let design = &eval["design"];
    assert!(design["target_zeta_closed"].as_f64().unwrap() > design["target_zeta_open"].as_f64().unwrap());
    assert!(eval["truth"]["target_zeta_closed"].as_f64().unwrap() > 0.1);
    let table = std::fs::read_to_string(p("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 11);

    ok(&["design", "--model", s(&p("model.json")), "--mode", "1", "--shift", "0", "--actuators", "1,2", "--out", s(&p("zero.json"))]);
    let zero = read_json(&p("zero.json"));
    let gain = zero["gain"]["data"].as_array().unwrap();
    assert_eq!(gain.len(), 400);
    assert!(gain.iter().all(|v| v.as_f64() == Some(0.0)));
    ok(&["evaluate", "--plan", s(&p("zero.json")), "--model", s(&p("model.json")), "--out", s(&p("zero_eval.json"))]);
    let z = read_json(&p("zero_eval.json"));
    assert_eq!(z["design"]["max_non_target_displacement"].as_f64().unwrap(), 0.0);

    let out = wadc(&["design", "--model", s(&p("model.json")), "--mode", "99", "--shift", "1", "--actuators", "1", "--out", s(&p("x.json"))]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr_json(&out)["error"], "mode_index");
}

#[test]
fn pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    let text = format!(
        "case = {:?}\noutput_dir = \"out\"\n[sim]\nduration = 60.0\nseeds = [1, 2]\n[pmu]\nrate = 20.0\n\
         [control]\ntarget = \"weakest\"\nshift = 2.0\nactuator_counts = [1, 3]\n",
        s(&repo_root().join("cases/ten_machine.toml"))
    );
    std::fs::write(&config, text).unwrap();
    let out = wadc(&["pipeline", "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["report.json", "seeds.csv", "modes.csv", "table.csv"] {
        assert!(dir.path().join("out").join(name).is_file(), "{name}");
    }
    let report = read_json(&dir.path().join("out/report.json"));
    assert_eq!(report["summary"]["seeds_ok"], 2);
}
