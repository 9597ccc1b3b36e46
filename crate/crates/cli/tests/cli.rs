use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_misreport"))
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn simulate(dir: &Path, extra: &[&str]) {
    run(bin()
        .args(["simulate", "--n", "4000", "--seed", "7", "--out-dir"])
        .arg(dir)
        .args(extra));
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

#[test]
fn simulate_writes_pair_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--scenario", "sim2"]);
    for f in ["manipulated.csv", "unmanipulated.csv", "roles.json", "meta.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(dir.path().join("manipulated.csv")).unwrap();
    assert!(header.starts_with("c_a,c_e,c_s,c_m,x,y,a,x_star\n"));
    let header = fs::read_to_string(dir.path().join("unmanipulated.csv")).unwrap();
    assert!(header.starts_with("c_a,c_e,c_s,c_m,x_star,y\n"));
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["spec"]["scenario"], "sim2");
    assert!(meta["realized_mr"].as_f64().unwrap() > 0.1);
    let roles: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("roles.json")).unwrap()).unwrap();
    assert_eq!(roles["ndee_no_c"], serde_json::json!(["c_m"]));
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), &[]);
    simulate(b.path(), &[]);
    for f in ["manipulated.csv", "unmanipulated.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn estimate_emits_one_record_per_agent_estimator_estimand() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--agent-target-mrs", "0.1,0.3"]);
    let d = dir.path();
    let out = run(bin()
        .args([
            "estimate",
            "--agent",
            "all",
            "--estimator",
            "cmre,nmre,ndee-nos",
            "--estimand",
            "mr,dim",
        ])
        .args(["--bootstrap", "10", "--seed", "1"])
        .arg("--manipulated")
        .arg(d.join("manipulated.csv"))
        .arg("--unmanipulated")
        .arg(d.join("unmanipulated.csv"))
        .arg("--roles")
        .arg(d.join("roles.json"))
        .arg("--out-csv")
        .arg(d.join("agents.csv")));
    let records = json_lines(&out);
    assert_eq!(records.len(), 2 * 3 * 2);
    let agents = fs::read_to_string(d.join("agents.csv")).unwrap();
    assert_eq!(
        agents.lines().next().unwrap(),
        "agent,estimator,estimand,value,ci_lower,ci_upper,variance,error"
    );
    assert_eq!(agents.lines().count(), 1 + 12);
    let cmre: Vec<&Value> = records
        .iter()
        .filter(|r| r["estimator"] == "CMRE" && r["estimand"] == "MR")
        .collect();
    assert_eq!(cmre.len(), 2);
    for r in cmre {
        assert!(r["value"].is_f64());
        assert!(r["ci"]["lower"].as_f64().unwrap() <= r["ci"]["upper"].as_f64().unwrap());
        assert!(r["variance"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn estimate_reports_missing_roles_as_failed_record() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let d = dir.path();
    let out = bin()
        .args(["estimate", "--estimator", "ndee-noc"])
        .arg("--manipulated")
        .arg(d.join("manipulated.csv"))
        .arg("--unmanipulated")
        .arg(d.join("unmanipulated.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let records = json_lines(&out);
    assert!(records[0]["error"].as_str().unwrap().contains("manifest"));
}

#[test]
fn estimate_with_renamed_columns_and_clip() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let d = dir.path();
    let rename = |f: &str, from: &[&str], to: &[&str]| {
        let text = fs::read_to_string(d.join(f)).unwrap();
        let (head, body) = text.split_once('\n').unwrap();
        let head: Vec<String> = head
            .split(',')
            .map(|h| {
                from.iter()
                    .position(|f| f == &h)
                    .map_or(h.to_string(), |i| to[i].to_string())
            })
            .collect();
        fs::write(d.join(format!("r_{f}")), format!("{}\n{body}", head.join(","))).unwrap();
    };
    rename(
        "manipulated.csv",
        &["x", "y", "a", "c_a"],
        &["coded", "paid", "insurer", "age"],
    );
    rename("unmanipulated.csv", &["x_star", "y", "c_a"], &["truth", "paid", "age"]);
    let out = run(bin()
        .args([
            "estimate",
            "--clip",
            "--col-x",
            "coded",
            "--col-y",
            "paid",
            "--col-agent",
            "insurer",
        ])
        .args(["--col-xstar", "truth", "--cols-c", "age,c_e,c_s,c_m"])
        .arg("--manipulated")
        .arg(d.join("r_manipulated.csv"))
        .arg("--unmanipulated")
        .arg(d.join("r_unmanipulated.csv")));
    let records = json_lines(&out);
    assert_eq!(records.len(), 1);
    let v = records[0]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&v));
}

#[test]
fn bad_inputs_exit_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["estimate", "--manipulated", "nope.csv", "--unmanipulated", "nope.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["simulate", "--scenario", "sim9", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim9"));
}

#[test]
fn sweep_writes_aggregate_replications_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.json");
    fs::write(
        &config,
        r#"{"base": {"scenario": "sim1", "n": 2000, "seed": 4},
            "sweep": {"parameter": "target_mr", "values": [0.0, 0.1, 0.2]},
            "replications": 2,
            "estimators": ["cmre", "ocsvm"],
            "learner": {"gbt": {"n_rounds": 10}}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    run(bin()
        .args(["sweep", "--jobs", "2", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir));
    let agg = fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    let mut lines = agg.lines();
    assert_eq!(
        lines.next().unwrap(),
        "param_value,estimator,mean,std,n_ok,n_fail,true_mr,agent"
    );
    assert_eq!(lines.count(), 3 * 2);
    let reps = fs::read_to_string(out_dir.join("replications.csv")).unwrap();
    assert_eq!(reps.lines().count(), 1 + 3 * 2 * 2);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 6);
    assert_eq!(manifest["config"]["replications"], 2);
}
