//! End-to-end tests of the `patrol` binary: exit codes, artifact layout,
//! and agreement between the optimizer's reports and the evaluate command.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn patrol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patrol"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_and_missing_inputs_exit_2() {
    let out = patrol(&["optimize", "--graph", "builtin:sf", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = patrol(&[
        "evaluate",
        "--graph",
        "/no/such/graph.json",
        "--strategy",
        "/no/such/strategy.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("/no/such/graph.json"),
        "error must name the missing path: {}",
        stderr_of(&out)
    );

    let out = patrol(&["optimize", "--graph", "builtin:nope", "--metric", "sg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_strategies_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "0.6,0.6\n0.5,0.5\n").unwrap();
    let out = patrol(&["evaluate", "--graph", "builtin:sf", "--strategy"]);
    assert_eq!(out.status.code(), Some(2)); // missing value is a usage error
    let out = patrol(&[
        "evaluate",
        "--graph",
        "builtin:sf",
        "--strategy",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // valid matrix of the wrong size for the graph
    let small = dir.path().join("small.csv");
    std::fs::write(&small, "0.5,0.5\n0.5,0.5\n").unwrap();
    let out = patrol(&[
        "evaluate",
        "--graph",
        "builtin:sf",
        "--strategy",
        small.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unwritable_output_exits_4() {
    let out = patrol(&[
        "optimize",
        "--graph",
        "builtin:sf",
        "--metric",
        "sg",
        "--tau",
        "9",
        "--inits",
        "1",
        "--out",
        "/proc/definitely/not/writable",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr_of(&out).contains("cannot write"));
}

#[test]
fn same_seed_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, seed: &str| {
        let out_dir = dir.path().join(sub);
        let out = patrol(&[
            "optimize",
            "--graph",
            "builtin:sf",
            "--metric",
            "sg",
            "--tau",
            "9",
            "--target",
            "crime",
            "--inits",
            "2",
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
        std::fs::read(out_dir.join("strategy.csv")).unwrap()
    };
    let a = run("a", "0");
    let b = run("b", "0");
    // base seeds far enough apart that the init windows cannot overlap
    let c = run("c", "1000");
    assert_eq!(a, b, "same seed must reproduce the strategy bytes");
    assert!(a != c, "a different seed should explore differently");
}

#[test]
fn evaluate_agrees_with_the_optimizer_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = patrol(&[
        "optimize",
        "--graph",
        "builtin:sf",
        "--metric",
        "sg",
        "--tau",
        "9",
        "--target",
        "crime",
        "--inits",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let summary = read_json(&out_dir.join("summary.json"));
    let best_metric = summary["best"]["metric"].as_f64().unwrap();
    let best_penalty = summary["best"]["penalty"].as_f64().unwrap();

    let out = patrol(&[
        "evaluate",
        "--graph",
        "builtin:sf",
        "--strategy",
        out_dir.join("strategy.csv").to_str().unwrap(),
        "--tau",
        "9",
        "--target",
        "crime",
        "--json",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let eval = stdout_json(&out);
    let row = &eval["evaluations"][0];
    assert!((row["j_sg"].as_f64().unwrap() - best_metric).abs() <= 1e-9);
    assert!((row["penalty"].as_f64().unwrap() - best_penalty).abs() <= 1e-9);
    assert!(row["j_mht"].as_f64().unwrap().is_finite());
    assert!(row["j_rte"].as_f64().unwrap() >= 0.0);
}

#[test]
fn deterministic_cycle_scores_zero_return_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let cycle = dir.path().join("cycle.csv");
    let mut text = String::new();
    for i in 0..12 {
        let row: Vec<&str> = (0..12).map(|j| if j == (i + 1) % 12 { "1" } else { "0" }).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&cycle, text).unwrap();
    let out = patrol(&[
        "evaluate",
        "--graph",
        "builtin:sf",
        "--strategy",
        cycle.to_str().unwrap(),
        "--json",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let row = stdout_json(&out)["evaluations"][0].clone();
    assert_eq!(row["j_rte"].as_f64().unwrap(), 0.0);
    let mht = row["j_mht"].as_f64().unwrap();
    assert!(mht.is_finite() && mht > 0.0);
}

#[test]
fn export_heatmap_writes_grid_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let strategy = dir.path().join("p.csv");
    std::fs::write(&strategy, "0.25,0.75\n0.5,0.5\n").unwrap();
    let grid = dir.path().join("grid.csv");
    let svg = dir.path().join("grid.svg");
    let out = patrol(&[
        "export-heatmap",
        "--strategy",
        strategy.to_str().unwrap(),
        "--out",
        grid.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert_eq!(std::fs::read_to_string(&grid).unwrap(), "0.25,0.75\n0.5,0.5\n");
    let svg_text = std::fs::read_to_string(&svg).unwrap();
    assert!(svg_text.starts_with("<svg"));
    assert_eq!(svg_text.matches("<rect").count(), 4);
}

#[test]
fn simulate_reports_a_proper_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let strategy = dir.path().join("p.csv");
    let row = "0.08333333333333333,".repeat(11);
    let mut text = String::new();
    for _ in 0..12 {
        text.push_str(&row);
        text.push_str("0.08333333333333337\n");
    }
    std::fs::write(&strategy, text).unwrap();
    let out = patrol(&[
        "simulate",
        "--graph",
        "builtin:sf",
        "--strategy",
        strategy.to_str().unwrap(),
        "--from",
        "0",
        "--to",
        "5",
        "--trials",
        "20000",
        "--horizon",
        "40",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report = stdout_json(&out);
    let freq: Vec<f64> = report["frequencies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(freq.len(), 40);
    let censored = report["censored_fraction"].as_f64().unwrap();
    let total: f64 = freq.iter().sum::<f64>() + censored;
    assert!((total - 1.0).abs() <= 1e-9);
}

#[test]
fn runspec_files_drive_runs_and_reject_typos() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let spec = dir.path().join("run.json");
    std::fs::write(
        &spec,
        format!(
            r#"{{
  "graph": "builtin:sf",
  "metric": "sgm",
  "robots": 2,
  "tau": 9,
  "target": "crime",
  "config": {{ "num_inits": 1, "max_iters": 60 }},
  "out_dir": "{}",
  "export_heatmap": true
}}"#,
            out_dir.display()
        ),
    )
    .unwrap();
    let out = patrol(&["optimize", "--spec", spec.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    for name in [
        "strategy_robot1.csv",
        "strategy_robot2.csv",
        "manifest.json",
        "records.jsonl",
        "summary.json",
        "strategy_robot1.svg",
    ] {
        assert!(out_dir.join(name).exists(), "missing artifact {name}");
    }
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["strategies"].as_array().unwrap().len(), 2);

    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, r#"{"graph":"builtin:sf","metrik":"sg"}"#).unwrap();
    let out = patrol(&["optimize", "--spec", typo.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("typo.json"));
}

#[test]
fn greedy_spends_the_full_budget() {
    let dir = tempfile::tempdir().unwrap();
    let strategy = dir.path().join("p.csv");
    let row = "0.08333333333333333,".repeat(11);
    let mut text = String::new();
    for _ in 0..12 {
        text.push_str(&row);
        text.push_str("0.08333333333333337\n");
    }
    std::fs::write(&strategy, text).unwrap();
    let report_path = dir.path().join("alloc.json");
    let out = patrol(&[
        "greedy",
        "--graph",
        "builtin:sf",
        "--strategy",
        strategy.to_str().unwrap(),
        "--budget",
        "14",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report = read_json(&report_path);
    let total: u64 = report["tau"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 14);

    let out = patrol(&[
        "greedy",
        "--graph",
        "builtin:sf",
        "--strategy",
        strategy.to_str().unwrap(),
        "--budget",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(2), "budget below node count");
}

#[test]
fn partitioned_runs_write_per_group_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("parts");
    let out = patrol(&[
        "optimize",
        "--graph",
        "builtin:sf",
        "--metric",
        "sg",
        "--tau",
        "9",
        "--target",
        "crime",
        "--inits",
        "1",
        "--partition",
        "0,1,2,3,4,6,7;5,8,9,10,11",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(out_dir.join("partition1/strategy.csv").exists());
    assert!(out_dir.join("partition2/strategy.csv").exists());
    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["partitions"].as_array().unwrap().len(), 2);

    let out = patrol(&[
        "optimize",
        "--graph",
        "builtin:sf",
        "--metric",
        "sg",
        "--tau",
        "9",
        "--inits",
        "1",
        "--partition",
        "0,1;1,2",
    ]);
    assert_eq!(out.status.code(), Some(2), "overlapping groups are invalid");
}

#[test]
fn coopt_conserves_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("co");
    let out = patrol(&[
        "coopt",
        "--graph",
        "builtin:sf",
        "--budget",
        "13",
        "--target",
        "crime",
        "--inits",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let defense = read_json(&out_dir.join("defense.json"));
    let total: u64 = defense["tau"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 13);
    assert!(out_dir.join("strategy.csv").exists());
}
