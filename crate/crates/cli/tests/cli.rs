use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn pruw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pruw")).args(args).env_remove("PRUW_SEED").output().expect("spawn pruw")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "pruw failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn csv_rows(text: &str) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        [
            "N", "M", "L", "q", "d_read", "d_write", "cr_measured", "cw_measured", "cr_theory", "cw_theory", "dr_measured",
            "dw_measured", "query_overhead"
        ]
    );
    r.records().map(Result::unwrap).collect()
}

#[test]
fn plan_reports_single_section_at_a_third() {
    let out = stdout(&pruw(&["-n", "6", "-d", "1/3", "plan", "--format", "json"]));
    let plan: Value = serde_json::from_str(&out).unwrap();
    let regions = plan["layout"]["regions"].as_array().unwrap();
    assert_eq!(regions.len(), 1);
    assert_eq!((regions[0]["ell_r"].as_u64(), regions[0]["ell_w"].as_u64()), (Some(3), Some(3)));
    assert_eq!(plan["predicted_cr"], "2");
    assert_eq!(plan["predicted_cw"], "2");
    assert_eq!(plan["closed_form_cr"], "2");
}

#[test]
fn plan_zero_budget_costs_three() {
    let out = stdout(&pruw(&["-n", "6", "-d", "0", "plan", "--format", "json"]));
    let plan: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(plan["predicted_cr"], "3");
    let table = stdout(&pruw(&["-n", "6", "-d", "0", "plan", "--format", "table"]));
    assert!(table.contains("C_R predicted 3 (3.0000), closed form 3"), "{table}");
}

#[test]
fn odd_n_warns() {
    let o = pruw(&["-n", "5", "-d", "1/4", "plan", "--format", "json"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("odd"));
    let plan: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(plan["closed_form_cr"].is_null());
}

#[test]
fn invalid_parameters_exit_nonzero() {
    for args in [
        vec!["-n", "3", "plan"],
        vec!["-d", "1", "plan"],
        vec!["-q", "12", "plan"],
        vec!["--transport", "socket", "run"],
        vec!["-n", "4", "-q", "5", "-d", "1/2", "run"],
    ] {
        let o = pruw(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"), "{args:?}");
    }
}

#[test]
fn run_matches_plan_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = dir.path().join("a.bin");
    let t2 = dir.path().join("b.bin");
    let base = ["-n", "6", "-m", "3", "-l", "600", "--d-read", "1/4", "--d-write", "0.1"];
    let run = |path: &std::path::Path| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend(["run", "--rounds", "2", "--theta", "2", "--format", "csv", "--transcript", path.to_str().unwrap()]);
        let o = Command::new(env!("CARGO_BIN_EXE_pruw")).args(&args).env("PRUW_SEED", "42").output().unwrap();
        stdout(&o)
    };
    let a = run(&t1);
    let b = run(&t2);
    assert_eq!(a, b);
    assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());
    assert!(!std::fs::read(&t1).unwrap().is_empty());

    let mut args: Vec<&str> = base.to_vec();
    args.extend(["plan", "--format", "json"]);
    let plan: Value = serde_json::from_str(&stdout(&pruw(&args))).unwrap();
    let rows = csv_rows(&a);
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(&row[6], plan["predicted_cr"].as_str().unwrap());
        assert_eq!(&row[7], plan["predicted_cw"].as_str().unwrap());
        assert_eq!(&row[10], plan["predicted_dr"].as_str().unwrap());
        assert_eq!(&row[11], plan["predicted_dw"].as_str().unwrap());
    }
}

struct Daemon(Child, String);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn daemon() -> Daemon {
    let mut child = Command::new(env!("CARGO_BIN_EXE_pruw"))
        .args(["serve-node", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    Daemon(child, addr)
}

#[test]
fn socket_daemons_reproduce_the_in_process_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let local = dir.path().join("local.bin");
    let remote = dir.path().join("remote.bin");
    let daemons: Vec<Daemon> = (0..4).map(|_| daemon()).collect();
    let nodes = daemons.iter().map(|d| d.1.clone()).collect::<Vec<_>>().join(",");
    let common = ["-n", "4", "-m", "2", "-l", "90", "-d", "1/4", "--seed", "7", "--format", "csv"];
    let mut args = common.to_vec();
    args.extend(["run", "--transcript", local.to_str().unwrap()]);
    let a = stdout(&pruw(&args));
    let mut args = common.to_vec();
    args.extend(["--transport", "socket", "--nodes", &nodes, "run", "--transcript", remote.to_str().unwrap()]);
    let b = stdout(&pruw(&args));
    assert_eq!(a, b);
    assert_eq!(std::fs::read(&local).unwrap(), std::fs::read(&remote).unwrap());
}

#[test]
fn audit_small_field_passes_exactly() {
    let o = pruw(&["-n", "4", "-m", "2", "-q", "13", "-l", "12", "-d", "1/2", "audit", "--format", "json"]);
    let reports: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        assert_eq!(r["passed"], true);
        for e in r["report"]["entries"].as_array().unwrap() {
            if e["diagnostic"] == true {
                assert_ne!(e["exact_distance"], "0");
            } else {
                assert_eq!(e["exact_distance"], "0");
            }
        }
    }
}

#[test]
fn audit_large_field_needs_sampling() {
    let o = pruw(&["-n", "4", "-m", "2", "-l", "12", "-d", "1/2", "audit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--mode sample"));
    let o = pruw(&["-n", "4", "-m", "2", "-l", "12", "-d", "1/2", "--seed", "3", "audit", "--mode", "sample", "--samples", "1000", "--format", "table"]);
    let text = stdout(&o);
    assert!(text.contains("all single-database views pass"), "{text}");
}

#[test]
fn sweep_lies_on_the_line() {
    let out = stdout(&pruw(&["-n", "6", "-m", "1", "-l", "240", "sweep", "--format", "csv"]));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 11);
    assert_eq!(&rows[0][6], "3");
    for row in &rows {
        assert_eq!(&row[6], &row[8]);
        assert_eq!(&row[7], &row[9]);
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"N": 8, "M": 2, "L": 600, "d_read": 0.25, "d_write": "1/3"}"#).unwrap();
    let cfg = path.to_str().unwrap();
    let plan: Value = serde_json::from_str(&stdout(&pruw(&["--config", cfg, "plan", "--format", "json"]))).unwrap();
    assert_eq!(plan["layout"]["n_dbs"], 8);
    assert_eq!(plan["budgets"]["d_read"], "1/4");
    assert_eq!(plan["budgets"]["d_write"], "1/3");
    let plan: Value = serde_json::from_str(&stdout(&pruw(&["--config", cfg, "-n", "6", "--d-write", "0", "plan", "--format", "json"]))).unwrap();
    assert_eq!(plan["layout"]["n_dbs"], 6);
    assert_eq!(plan["layout"]["length"], 600);
    assert_eq!(plan["budgets"]["d_write"], "0");
    std::fs::write(&path, r#"{"N": 8, "typo": 1}"#).unwrap();
    assert_eq!(pruw(&["--config", cfg, "plan"]).status.code(), Some(2));
}

#[test]
fn bits_columns_scale_by_log_q() {
    let out = stdout(&pruw(&["-n", "6", "-m", "2", "-l", "24", "-q", "13", "-d", "1/3", "--bits", "run", "--format", "csv"]));
    let mut r = csv::Reader::from_reader(out.as_bytes());
    assert_eq!(r.headers().unwrap().iter().rev().take(2).collect::<Vec<_>>(), ["cw_bits", "cr_bits"]);
    let row = r.records().next().unwrap().unwrap();
    let bits: f64 = row[13].parse().unwrap();
    assert!((bits - 2.0 * 13f64.log2()).abs() < 1e-9);
}
