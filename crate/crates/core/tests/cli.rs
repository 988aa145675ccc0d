use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--clients",
    "2",
    "--rounds",
    "3",
    "--c-max",
    "6",
    "--window",
    "2",
    "--overlap",
    "1",
    "--capacity",
    "6",
    "--epochs",
    "2",
    "--feature-dim",
    "3",
    "--hidden-dim",
    "4",
    "--n-per-cat",
    "8",
    "--n-test-per-cat",
    "4",
];

fn fedkace(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedkace"))
        .args(args)
        .env("FEDKACE_OUT", out)
        .output()
        .expect("binary runs")
}

fn run_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["run"];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn run_writes_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedkace(&run_args(&["--method", "fedkace", "--seed", "4"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("fedkace-seed4");
    let csv = fs::read_to_string(run.join("rounds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "run_id,method,seed,round,client,acc,regret,lambda_mean,switched,buffer_size,buffer_cond"
    );
    assert_eq!(lines.len(), 1 + 3 * 2);
    // regret is filled from the paired centralized run
    assert!(lines[1..].iter().all(|l| !l.split(',').nth(6).unwrap().is_empty()));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert!(summary["aa"].is_number());
    assert!(summary["ar"].is_number());
    assert_eq!(summary["config"]["seed"], 4);

    let again = fedkace(&run_args(&["--method", "fedkace", "--seed", "4"]), dir.path());
    assert!(again.status.success());
    assert_eq!(csv, fs::read_to_string(run.join("rounds.csv")).unwrap());
}

#[test]
fn centralized_has_zero_regret() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedkace(&run_args(&["--method", "centralized"]), dir.path());
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("centralized-seed1/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["ar"], 0.0);
}

#[test]
fn no_regret_leaves_column_empty_and_dump_buffers_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedkace(
        &run_args(&["--method", "as6", "--no-regret", "--dump-buffers"]),
        dir.path(),
    );
    assert!(out.status.success());
    let run = dir.path().join("as6-seed1");
    let csv = fs::read_to_string(run.join("rounds.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(6) == Some("")));
    let buffers = fs::read_to_string(run.join("buffers.csv")).unwrap();
    assert!(buffers.starts_with("round,client,category,ids\n"));
    assert!(buffers.lines().count() > 1);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        fedkace(&["run", "--overlap", "7", "--window", "5"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        fedkace(&["run", "--method", "fedprox"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(fedkace(&["frobnicate"], dir.path()).status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "clients = 3\nbogus = 1\n").unwrap();
    let out = fedkace(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn unreadable_config_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = fedkace(&["run", "--config", missing.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "clients = 10\nrounds = 2\nmethod = \"lkc\"\n").unwrap();
    let mut args = vec!["run", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.push("--no-regret");
    let out = fedkace(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("localkace-seed1/rounds.csv")).unwrap();
    // flags set two clients and three rounds, overriding the file's ten and two
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}

#[test]
fn dump_schedule_prints_windows_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["dump-schedule"];
    args.extend_from_slice(SMALL);
    args.push("--data");
    let out = fedkace(&args, dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2 * 3);
    assert!(text.starts_with("client 0 round 1 categories "));
    let data = fs::read_to_string(dir.path().join("fedkace-seed1/client1.csv")).unwrap();
    assert!(data.starts_with("id,round,label,feat0,feat1,feat2\n"));
}

#[test]
fn dump_buffer_filters_by_round_and_client() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["dump-buffer"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--round", "2", "--client", "1"]);
    let out = fedkace(&args, dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,client,category,ids"));
    let rest: Vec<&str> = lines.collect();
    assert!(!rest.is_empty());
    assert!(rest.iter().all(|l| l.starts_with("2,1,")));
}
