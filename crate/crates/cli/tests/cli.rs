use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DVector;

use ddlqr::excitation::generate_pe_input;
use ddlqr::io::{format_data, format_system};
use ddlqr::LinearSystem;

fn ddlqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddlqr")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_scalar_plant_reaches_golden_gain() {
    let dir = tempfile::tempdir().unwrap();
    let sys = write(dir.path(), "sys.txt", "1 1\n1\n1\n");
    let report = dir.path().join("report.json");
    let o = ddlqr(&["solve", s(&sys), "--out", s(&report), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gain: f64 = stdout(&o).trim().parse().unwrap();
    assert!((gain - 0.618_033_988_749_895).abs() <= 1e-8, "{gain}");

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["n", "m", "eta", "iterations", "final_gain", "final_theta", "per_iteration", "wall_time_seconds"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let first = &json["per_iteration"][0];
    for key in ["gain_delta", "cond_V", "min_eig_theta", "monotone_gap"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["final_gain"][0][0].as_f64().unwrap(), gain);
    assert!(json.get("audit").is_none());
}

#[test]
fn solve_fixed_iterations_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let sys = LinearSystem::random_controllable(3, 2, 8).unwrap();
    let path = write(dir.path(), "sys.txt", &format_system(&sys));
    let weights = write(dir.path(), "w.txt", "3 2\n1 0 0\n0 1 0\n0 0 1\n1 0\n0 1\n");
    let report = dir.path().join("r.json");
    let o = ddlqr(&["solve", s(&path), "--weights", s(&weights), "--iterations", "10", "--eps", "1e3", "--audit", "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["iterations"], 10);
    assert!(json["audit"]["error_vs_oracle"].as_f64().unwrap() <= 1e-10);
    assert!(json["per_iteration"].as_array().unwrap().iter().all(|r| r["closed_loop_radius"].as_f64().unwrap() < 1.0));
    // Floats are written with 17 significant digits.
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("e-1") || text.contains("e0"));
}

#[test]
fn missing_and_malformed_files_are_usage_errors() {
    let o = ddlqr(&["solve", "/nonexistent/plant.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/plant.txt"));

    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.txt", "2 1\n1 2\n3 oops\n1\n1\n");
    let o = ddlqr(&["solve", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    assert_eq!(ddlqr(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(ddlqr(&["bench", "--trials", "x"]).status.code(), Some(2));
}

#[test]
fn bench_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = ddlqr(&["bench", "--dims", "3", "--trials", "100", "--seed", "1", "--jobs", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "n,trials,avg_error,avg_time_seconds,failures");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "3");
    assert_eq!(row[1], "100");
    assert!(row[2].parse::<f64>().unwrap() <= 1e-10);
    assert_eq!(row[4], "0");
}

#[test]
fn bench_is_independent_of_worker_count() {
    let run = |jobs: &str| {
        let o = ddlqr(&["bench", "--dims", "3,4", "--trials", "8", "--seed", "5", "--jobs", jobs]);
        assert!(o.status.success());
        // Timing varies between runs; compare the deterministic columns.
        stdout(&o)
            .lines()
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{}", c[0], c[1], c[2], c[4])
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn noisy_rows_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("noisy.csv");
    let o = ddlqr(&["noisy", "--trials", "1", "--seed", "9", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("mean_error="));
    let first = fs::read_to_string(&out).unwrap();
    let mut lines = first.lines();
    assert_eq!(lines.next().unwrap(), "trial,seed,error_norm,stabilizing,margin_lhs,margin_ok");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 6);
    assert!(["0", "1"].contains(&row[3]) && ["0", "1"].contains(&row[5]));
    assert!(lines.next().is_none());

    let o = ddlqr(&["noisy", "--trials", "1", "--seed", "9", "--jobs", "2"]);
    assert_eq!(stdout(&o), first);
}

#[test]
fn noisy_zero_noise_matches_clean_accuracy() {
    let o = ddlqr(&["noisy", "--trials", "5", "--w-max", "0"]);
    assert!(o.status.success());
    let summary = stderr(&o);
    let mean: f64 = summary
        .split_whitespace()
        .find_map(|f| f.strip_prefix("mean_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(mean <= 1e-10, "{summary}");
    assert!(summary.contains("destabilized=0"));
}

#[test]
fn pe_check_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let constant = write(dir.path(), "const.txt", "1 1 6\n1 0\n1 1\n1 2\n1 3\n1 4\n1 5\n");
    let o = ddlqr(&["pe-check", s(&constant), "--order", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("NOT persistently exciting"));

    let o = ddlqr(&["pe-check", s(&constant), "--order", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("N >= (m+1)L-1 = 7"), "{}", stdout(&o));

    let sys = LinearSystem::random_controllable(3, 2, 2).unwrap();
    let u = generate_pe_input(2, 5, 20, 2).unwrap();
    let traj = sys.simulate(&DVector::from_element(3, 0.3), &u).unwrap();
    let good = write(dir.path(), "pe.txt", &format_data(&traj));
    let o = ddlqr(&["pe-check", s(&good), "--order", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("pass"));

    let o = ddlqr(&["pe-check", "/nonexistent/data.txt", "--order", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn deadbeat_commands() {
    let dir = tempfile::tempdir().unwrap();
    let scalar = write(dir.path(), "s.txt", "1 1\n0.8\n2\n");
    let o = ddlqr(&["deadbeat", "--system", s(&scalar)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let k: f64 = stdout(&o).trim().parse().unwrap();
    assert!((k - 0.4).abs() <= 1e-12, "{k}");

    let sys = LinearSystem::random_controllable(3, 2, 4).unwrap();
    let path = write(dir.path(), "sys3.txt", &format_system(&sys));
    let o = ddlqr(&["deadbeat", "--system", s(&path), "--audit"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("pass"));

    let short = write(dir.path(), "short.txt", "2 1 3\n1 0 0\n1 1 1\n0 2 1\n");
    let o = ddlqr(&["deadbeat", "--data", s(&short)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("(m+1)(n+1)-1"), "{}", stderr(&o));

    let u = generate_pe_input(2, 4, 11, 4).unwrap();
    let traj = sys.simulate(&DVector::from_element(3, 0.5), &u).unwrap();
    let data = write(dir.path(), "d.txt", &format_data(&traj));
    let o = ddlqr(&["deadbeat", "--data", s(&data), "--system", s(&path), "--audit"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));

    assert_eq!(ddlqr(&["deadbeat", "--data", s(&data), "--audit"]).status.code(), Some(2));
}
