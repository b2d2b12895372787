//! End-to-end runs of the binary against the employee/bonus log.

use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn golden(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(p).unwrap()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reenactd")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn employees() -> String {
    fixture("employees.log").to_string_lossy().into_owned()
}

#[test]
fn provenance_csv_for_t7_on_bonus() {
    let o = run(&["provenance", "--log", &employees(), "--txn", "T7", "--rel", "Bonus", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let want = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/t7_bonus.csv"),
    )
    .unwrap();
    assert_eq!(stdout(&o), want);
}

#[test]
fn provenance_without_rel_lists_each_relation() {
    let o = run(&["provenance", "--log", &employees(), "--txn", "T7", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("# Employee\n"));
    assert!(out.contains("# Bonus\n"));
    assert!(out.ends_with("1,101,2000,1,101,1000,F,T\n"));
}

#[test]
fn provenance_filter() {
    let log = employees();
    let base = ["provenance", "--log", &log, "--txn", "T7", "--rel", "Bonus", "--filter"];
    let keep = run(&[&base[..], &["U2 AND Amount > 1000"]].concat());
    assert_eq!(stdout(&keep).lines().count(), 2);
    let drop = run(&[&base[..], &["U1"]].concat());
    assert_eq!(stdout(&drop).lines().count(), 1);
    let bad = run(&[&base[..], &["Missing = 1"]].concat());
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("unknown column"));
}

#[test]
fn run_on_empty_log() {
    let o = run(&["run", "--log", &fixture("empty.log").to_string_lossy(), "--dump-at", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "");
}

#[test]
fn run_prints_final_state() {
    let o = run(&["run", "--log", &employees()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), golden("run_employees.txt"));
}

#[test]
fn optimized_plan_reads_each_relation_once() {
    let o = run(&["reenact", "--log", &employees(), "--txn", "T7", "--opt", "--plan-only"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("access Bonus = 1\n"));
    assert!(out.contains("access Employee = 1\n"));
    assert_eq!(out, golden("reenact_t7_opt_plan.txt"));
}

#[test]
fn reenactment_matches_direct_execution() {
    for txn in ["T0", "T1", "T7", "T8"] {
        let o = run(&["reenact", "--log", &employees(), "--txn", txn]);
        assert_eq!(o.status.code(), Some(0), "{txn}: {}", stderr(&o));
        assert!(stdout(&o).contains("direct execution: equivalent (exact)"), "{txn}");
    }
    let o = run(&["reenact", "--log", &employees(), "--txn", "T7", "--opt", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let j: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(j["plans"][1]["relation"], "Bonus");
    assert_eq!(j["plans"][1]["access"]["Bonus"], 1);
}

#[test]
fn single_scan_form_rejects_insert_select() {
    let o = run(&["reenact", "--log", &employees(), "--txn", "T8", "--opt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("VALUES"));
}

#[test]
fn history_reenactment_rebuilds_state() {
    let o = run(&["history", "--log", &employees(), "--at", "26", "--reenact"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).matches("(matches)").count(), 2);
}

#[test]
fn snapshot_inside_transaction() {
    let o = run(&["history", "--log", &employees(), "--at", "22", "--txn", "T8", "--rel", "Bonus"]);
    assert_eq!(o.status.code(), Some(0));
    // T8 does not see T7's uncommitted raise.
    assert!(stdout(&o).contains("(1, 101, 1000)"));
    assert!(!stdout(&o).contains("(1, 101, 2000)"));
}

#[test]
fn malformed_logs_exit_2_with_position() {
    for name in ["syntax", "unknown_table", "unknown_column", "duplicate_timestamp", "after_commit", "uncommitted", "type_mismatch"] {
        let path = fixture(&format!("malformed/{name}.log"));
        let o = run(&["run", "--log", &path.to_string_lossy()]);
        assert_eq!(o.status.code(), Some(2), "{name}");
        let err = stderr(&o);
        let pos = err.split(".log:").nth(1).unwrap_or("");
        let mut parts = pos.split(':');
        let line: u32 = parts.next().unwrap().parse().unwrap_or(0);
        let col: u32 = parts.next().unwrap_or("").parse().unwrap_or(0);
        assert!(line > 0 && col > 0, "{name}: {err}");
    }
}

#[test]
fn missing_file_and_bad_flags_exit_2() {
    assert_eq!(run(&["run", "--log", "/nonexistent.log"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "--check", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["reenact", "--log", &employees(), "--txn", "T99"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn verify_is_deterministic_and_passes() {
    let args = ["verify", "--seed", "11", "--iters", "15"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let j: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(j["status"], "PASS");
    assert_eq!(j["stats"]["histories"], 15);
}

#[test]
fn verify_a_log() {
    let o = run(&["verify", "--log", &employees()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let j: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(j["status"], "PASS");
}
