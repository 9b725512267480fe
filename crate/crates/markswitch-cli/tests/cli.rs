//! End-to-end checks of the binary: exit codes, file outputs, determinism.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_markswitch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// A valid two-mode instance with time-crossing gains.
fn valid_instance() -> String {
    serde_json::json!({
        "schema_version": 1,
        "horizon": 1.0,
        "n_steps": 10,
        "beta": 2.0,
        "lambda": {"kind": "constant", "params": [1.0]},
        "marks": ["tick"],
        "phi": {"breakpoints": [0.0], "weights": [[1.0]]},
        "modes": [
            {
                "name": "early",
                "kernel": {"constant": {"value": 1.5, "eta": 9.0}},
                "terminal": {"affine": {"constant": 0.5}},
                "running_f": {"affine": {"constant": 0.6, "t": -0.6}},
                "running_g": {"affine": {"constant": 0.1}}
            },
            {
                "name": "late",
                "kernel": {"constant": {"value": 0.5}},
                "terminal": {"affine": {"constant": 0.5}},
                "running_f": {"affine": {"t": 1.2}},
                "running_g": {"affine": {}}
            }
        ],
        "costs": [
            {"from": 0, "to": 1, "base": 0.08},
            {"from": 1, "to": 0, "base": 0.08}
        ]
    })
    .to_string()
}

fn self_cost_instance() -> String {
    // Same instance with a nonzero C(0,0).
    valid_instance().replace(
        r#""costs":[{"base":0.08,"from":0,"to":1},{"base":0.08,"from":1,"to":0}]"#,
        r#""costs":[{"base":0.08,"from":0,"to":1},{"base":0.08,"from":1,"to":0},{"base":1.0,"from":0,"to":0}]"#,
    )
}

fn write(dir: &Path, name: &str, content: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn selftest_exits_zero() {
    let output = run(&["selftest"]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(stdout(&output).contains("all checks passed"));
}

#[test]
fn solve_writes_a_complete_value_surface() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let csv_path = dir.path().join("surface.csv");
    let output = run(&["solve", &instance, "--out", csv_path.to_str().unwrap()]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));

    let report: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["picard"]["converged"], true);

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "# schema_version=1");
    assert_eq!(lines.next().unwrap(), "k,w,n,mode,y,dK");
    // Rows: sum over k of (k+1)^2 nodes, times 2 modes (N = 10).
    let expected_rows: usize = (0..=10usize).map(|k| (k + 1) * (k + 1)).sum::<usize>() * 2;
    assert_eq!(lines.count(), expected_rows);
}

#[test]
fn solve_and_oracle_agree_at_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let solve_csv = dir.path().join("solve.csv");
    let oracle_csv = dir.path().join("oracle.csv");
    assert!(run(&["solve", &instance, "--out", solve_csv.to_str().unwrap()]).status.success());
    assert!(run(&["oracle", &instance, "--out", oracle_csv.to_str().unwrap()]).status.success());

    let root_value = |path: &Path, value_col: usize| -> Vec<f64> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(2)
            .filter(|l| l.starts_with("0,0,0,"))
            .map(|l| l.split(',').nth(value_col).unwrap().parse::<f64>().unwrap())
            .collect()
    };
    let solver_roots = root_value(&solve_csv, 4);
    let oracle_roots = root_value(&oracle_csv, 4);
    assert_eq!(solver_roots.len(), 2);
    for (a, b) in solver_roots.iter().zip(&oracle_roots) {
        assert!((a - b).abs() <= 1e-9, "solver {a} vs oracle {b}");
    }
}

#[test]
fn invalid_instance_exits_two_with_a_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "bad.json", &self_cost_instance());
    let output = run(&["solve", &instance]);
    assert_eq!(output.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_str(&stderr(&output)).unwrap();
    assert!(report["validation"]["violations"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v.as_object().unwrap().contains_key("self_switch_cost")));
}

#[test]
fn malformed_json_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "broken.json", "{ not json");
    let output = run(&["solve", &instance]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn simulate_rejects_zero_paths() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let output = run(&["simulate", &instance, "--paths", "0", "--seed", "1"]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let args = ["simulate", &instance, "--paths", "50", "--seed", "42"];
    let first = run(&args);
    let second = run(&args);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert!(stdout(&first).starts_with("# schema_version=1\npath,event,time,mark,label\n"));
}

#[test]
fn evaluate_methods_agree_within_noise() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let strategy = write(
        dir.path(),
        "strategy.json",
        &serde_json::json!({
            "schema_version": 1,
            "start_mode": 0,
            "switches": [{"time": 0.5, "mode": 1}]
        })
        .to_string(),
    );
    let mut estimates = Vec::new();
    for method in ["reweighted", "direct"] {
        let output = run(&[
            "evaluate",
            &instance,
            "--strategy-file",
            &strategy,
            "--paths",
            "20000",
            "--seed",
            "7",
            "--method",
            method,
        ]);
        assert!(output.status.success(), "stderr: {}", stderr(&output));
        let payload: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
        estimates.push((
            payload["estimate"]["mean"].as_f64().unwrap(),
            payload["estimate"]["stderr"].as_f64().unwrap(),
        ));
    }
    let combined = (estimates[0].1.powi(2) + estimates[1].1.powi(2)).sqrt();
    assert!(
        (estimates[0].0 - estimates[1].0).abs() <= 3.0 * combined,
        "reweighted {:?} vs direct {:?}",
        estimates[0],
        estimates[1]
    );
}

#[test]
fn evaluate_warns_on_off_grid_switch_times() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let strategy = write(
        dir.path(),
        "strategy.json",
        &serde_json::json!({
            "schema_version": 1,
            "start_mode": 0,
            "switches": [{"time": 0.512345, "mode": 1}]
        })
        .to_string(),
    );
    let output = run(&[
        "evaluate",
        &instance,
        "--strategy-file",
        &strategy,
        "--paths",
        "100",
        "--seed",
        "3",
    ]);
    assert!(output.status.success());
    assert!(stderr(&output).contains("snapped"));
}

#[test]
fn verify_reports_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let output = run(&["verify", &instance, "--paths", "4000", "--seed", "5"]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let payload: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
    let modes = payload["verification"]["per_mode"].as_array().unwrap();
    assert_eq!(modes.len(), 2);
    for mv in modes {
        assert!(mv["extracted_sigma_distance"].as_f64().unwrap() <= 3.0);
        assert_eq!(mv["random_exceeding"], 0);
        assert!(mv["dp_root_gap"].as_f64().unwrap() <= 1e-9);
    }
}

#[test]
fn exhausted_iteration_budget_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let output = run(&["solve", &instance, "--max-iter", "0"]);
    assert_eq!(output.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_str(&stderr(&output)).unwrap();
    assert_eq!(report["picard"]["converged"], false);
}

#[test]
fn solve_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    let first = run(&["solve", &instance, "--out", csv_a.to_str().unwrap()]);
    let second = run(&["solve", &instance, "--out", csv_b.to_str().unwrap()]);
    assert!(first.status.success() && second.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(std::fs::read(&csv_a).unwrap(), std::fs::read(&csv_b).unwrap());
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let instance = write(dir.path(), "instance.json", &valid_instance());
    let output = run(&["simulate", &instance, "--paths", "5"]);
    assert_eq!(output.status.code(), Some(1));
}
