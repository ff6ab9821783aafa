use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn repo_config(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// The desk robot with a small plan and search budget.
fn small_desk() -> Value {
    let mut c = repo_config("desk6r.json");
    c["optimizer"] = json!({
        "m": 6,
        "strategy": { "kind": "hybrid", "ga": { "pop_size": 12, "generations": 4 } },
        "factorizations": [[6, 1]],
        "compare": [{ "kind": "random", "samples": 200 }]
    });
    c["simulation"]["n_trials"] = json!(2000);
    c
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    fn config(&self, name: &str, value: &Value) -> PathBuf {
        self.write(name, &serde_json::to_string_pretty(value).unwrap())
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_posecal")).args(args).output().unwrap()
    }

    fn run_ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn run_err(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_then_evaluate_round_trips() {
    let ws = Workspace::new();
    let cfg = ws.config("desk.json", &small_desk());
    let out = ws.path("out");
    ws.run_ok(&["plan", "--config", s(&cfg), "--out", s(&out)]);
    let plan = ws.json("out/plan.json");
    let planned = plan["rho0"].as_f64().unwrap();
    assert_eq!(plan["poses"].as_array().unwrap().len(), 6);

    let plan_path = out.join("plan.json");
    ws.run_ok(&["evaluate", "--config", s(&cfg), "--out", s(&out), "--plan", s(&plan_path)]);
    let eval = ws.json("out/evaluation.json");
    let rho0 = eval["rho0"].as_f64().unwrap();
    assert!((rho0 - planned).abs() <= 1e-12 * planned, "{rho0} vs {planned}");
    assert!(eval["poses"].as_array().unwrap().iter().all(|p| p["feasible"] == json!(true)));

    ws.run_ok(&["evaluate", "--config", s(&cfg), "--out", s(&out), "--plan", s(&plan_path), "--repeat", "4"]);
    let rep = ws.json("out/evaluation.json")["rho0"].as_f64().unwrap();
    assert!((rep - rho0 / 2.0).abs() <= 1e-12 * rho0);
}

#[test]
fn plan_output_is_reproducible() {
    let ws = Workspace::new();
    let cfg = ws.config("toy.json", &repo_config("planar2r_elastostatic.json"));
    let a = ws.path("a");
    let b = ws.path("b");
    ws.run_ok(&["plan", "--config", s(&cfg), "--out", s(&a)]);
    ws.run_ok(&["plan", "--config", s(&cfg), "--out", s(&b), "--threads", "2"]);
    assert_eq!(std::fs::read(a.join("plan.json")).unwrap(), std::fs::read(b.join("plan.json")).unwrap());

    let c = ws.path("c");
    ws.run_ok(&["plan", "--config", s(&cfg), "--out", s(&c), "--seed", "8"]);
    let other: Value = serde_json::from_slice(&std::fs::read(c.join("plan.json")).unwrap()).unwrap();
    assert_eq!(other["design"]["seed"], json!(8));
}

#[test]
fn too_few_poses_is_rejected() {
    let ws = Workspace::new();
    let mut c = small_desk();
    c["optimizer"]["m"] = json!(1);
    let cfg = ws.config("desk.json", &c);
    let err = ws.run_err(&["plan", "--config", s(&cfg), "--out", s(&ws.path("out"))]);
    assert!(err.contains("cannot identify"), "{err}");
}

#[test]
fn repeated_pose_plan_is_unidentifiable() {
    let ws = Workspace::new();
    let cfg = ws.config("desk.json", &small_desk());
    let pose = json!({ "q_deg": [10, 20, -10, 5, 30, 0] });
    let plan = json!({ "schema_version": 1, "mode": "geometric", "poses": vec![pose; 6] });
    let plan_path = ws.config("plan.json", &plan);
    let err = ws.run_err(&["evaluate", "--config", s(&cfg), "--out", s(&ws.path("out")), "--plan", s(&plan_path)]);
    assert!(err.contains("unidentifiable") || err.contains("not identifiable"), "{err}");
}

#[test]
fn missing_plan_names_the_path() {
    let ws = Workspace::new();
    let cfg = ws.config("desk.json", &small_desk());
    let missing = ws.path("nowhere/plan.json");
    let err = ws.run_err(&["evaluate", "--config", s(&cfg), "--plan", s(&missing)]);
    assert!(err.contains("nowhere/plan.json"), "{err}");
}

#[test]
fn malformed_config_names_the_field() {
    let ws = Workspace::new();
    let mut c = small_desk();
    c["constraints"]["r_min"] = json!("wide");
    let cfg = ws.config("bad.json", &c);
    let err = ws.run_err(&["plan", "--config", s(&cfg)]);
    assert!(err.contains("constraints.r_min"), "{err}");

    let mut c = small_desk();
    c["sigmaa"] = json!(0.1);
    let cfg = ws.config("bad2.json", &c);
    let err = ws.run_err(&["plan", "--config", s(&cfg)]);
    assert!(err.contains("sigmaa"), "{err}");
}

#[test]
fn zero_threads_is_rejected() {
    let ws = Workspace::new();
    let cfg = ws.config("desk.json", &small_desk());
    let err = ws.run_err(&["plan", "--config", s(&cfg), "--threads", "0"]);
    assert!(err.contains("--threads"), "{err}");
}

#[test]
fn noiseless_simulation_has_no_error() {
    let ws = Workspace::new();
    let mut c = small_desk();
    let out = ws.path("out");
    let cfg = ws.config("desk.json", &c);
    ws.run_ok(&["plan", "--config", s(&cfg), "--out", s(&out)]);
    c["sigma"] = json!(0.0);
    let cfg0 = ws.config("desk0.json", &c);
    ws.run_ok(&["simulate", "--config", s(&cfg0), "--out", s(&out), "--plan", s(&out.join("plan.json"))]);
    let report = ws.json("out/simulation.json");
    assert!(report["empirical_rho0"].as_f64().unwrap() < 1e-9, "{report}");
    assert!(ws.path("out/simulation.txt").exists());
}

#[test]
fn compare_with_one_factorization_has_one_row_per_strategy() {
    let ws = Workspace::new();
    let cfg = ws.config("desk.json", &small_desk());
    let out = ws.path("out");
    ws.run_ok(&["compare", "--config", s(&cfg), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");

    let mut c = small_desk();
    c["optimizer"]["factorizations"] = json!([[4, 2]]);
    let cfg = ws.config("bad.json", &c);
    ws.run_err(&["compare", "--config", s(&cfg), "--out", s(&out)]);
}

#[test]
fn identify_recovers_noiseless_deviations() {
    use posecal::config::RunConfig;
    use posecal::model::ParamVector;
    use posecal::regression::{write_measurements_csv, MeasurementRecord};
    use posecal::simulate::simulate_measurements;

    let ws = Workspace::new();
    let cfg = ws.config("desk.json", &small_desk());
    let out = ws.path("out");
    ws.run_ok(&["plan", "--config", s(&cfg), "--out", s(&out)]);

    let setup = RunConfig::load(&cfg).unwrap().setup().unwrap();
    let plan = posecal::config::PlanFile::load(&out.join("plan.json")).unwrap().plan().unwrap();
    let truth: Vec<f64> = (0..18).map(|i| if i < 9 { 0.01 * (i as f64 - 4.0) } else { 0.0 }).collect();
    let truth = ParamVector::from_vec(6, truth).unwrap();
    let records: Vec<MeasurementRecord> = simulate_measurements(&setup.model, &truth, &plan, 0.0, 1).unwrap();
    ws.write("meas.csv", &write_measurements_csv(&records, 6));

    ws.run_ok(&["identify", "--config", s(&cfg), "--out", s(&out), "--measurements", s(&ws.path("meas.csv"))]);
    let id = ws.json("out/identification.json");
    let est: Vec<f64> = id["estimate"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (e, t) in est.iter().zip(&truth.as_slice()[..9]) {
        assert!((e - t).abs() < 1e-9, "{e} vs {t}");
    }
}
