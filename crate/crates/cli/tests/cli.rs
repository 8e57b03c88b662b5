use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rnbounds::sim::{treated_quantile_truth, truth_quantile, SimParams, StudyConfig};
use serde_json::Value;

const EIGHT_ROWS: &str = "y,d,z\n0.1,1,0\n0.5,1,0\n0.3,0,0\n0.9,0,0\n0.2,1,1\n0.8,1,1\n0.4,0,1\n1.2,0,1\n";

fn rnbounds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnbounds")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rnbounds(args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data lines of a CSV artifact (header comments and column line removed).
fn data_lines(file: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(file).unwrap();
    text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn json(file: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// `(y, d)` rows repeated for every instrument value: the instrument carries no information.
fn flat_instrument_csv() -> String {
    let base = [(0.3, 1), (1.1, 1), (-0.4, 1), (0.8, 1), (0.0, 0), (1.5, 0), (0.6, 0), (-1.0, 0)];
    let mut s = String::from("y,d,z\n");
    for z in [0, 1] {
        for (y, d) in base {
            s.push_str(&format!("{y},{d},{z}\n"));
        }
    }
    s
}

#[test]
fn eight_row_fixture_gives_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("eight.csv");
    std::fs::write(&input, EIGHT_ROWS).unwrap();
    let out = dir.path().join("out");
    ok(&["bounds", "--input", path(&input), "--grid", "0,1,5", "--tau", "100", "-o", path(&out)]);
    let rows = data_lines(&out.join("bounds.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][0], "0.0");
    assert_eq!(rows[4][0], "1.0");
    for r in &rows {
        let (lo, up): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
        assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&up));
    }
    for f in ["bounds.json", "diagnostics.json", "plot_data.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let env = json(&out.join("bounds.json"));
    assert_eq!(env["schema_version"], 1);
    assert_eq!(env["version"], rnbounds::VERSION);
    assert_eq!(env["config"]["bounds"]["tau"], 100.0);
    let text = std::fs::read_to_string(out.join("bounds.csv")).unwrap();
    assert!(text.starts_with("# schema_version: 1\n# rnbounds "));
    assert!(text.lines().nth(2).unwrap().starts_with("# config: {"));
}

#[test]
fn default_tau_is_the_study_value() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("eight.csv");
    std::fs::write(&input, EIGHT_ROWS).unwrap();
    let out = dir.path().join("out");
    ok(&["bounds", "--input", path(&input), "--grid", "0,1,5", "-o", path(&out)]);
    let implicit = snapshot(&out);
    ok(&["bounds", "--input", path(&input), "--grid", "0,1,5", "--tau", "100", "-o", path(&out)]);
    assert_eq!(implicit, snapshot(&out));
    let env = json(&out.join("bounds.json"));
    assert_eq!(env["config"]["bounds"]["tau"].as_f64(), Some(StudyConfig::default().bounds.tau));
}

#[test]
fn corrupted_csv_is_fatal_and_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    std::fs::write(&input, "y,d,z\n0.1,1,0\n0.5,0,1\nabc,1,0\n0.2,0,1\n").unwrap();
    let out = rnbounds(&["bounds", "--input", path(&input), "-o", path(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(line["level"], "error");
    assert_eq!(line["command"], "bounds");
    assert_eq!(line["kind"], "input");
    assert_eq!(line["row"], 3);
    assert!(line["message"].as_str().unwrap().contains("row 3"));

    std::fs::write(&input, "y,d,z\n0.1,1,0\n0.5,0\n").unwrap();
    let out = rnbounds(&["bounds", "--input", path(&input), "-o", path(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(1));
    let line: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().lines().last().unwrap()).unwrap();
    assert_eq!(line["row"], 2);
}

#[test]
fn missing_seed_is_rejected_in_simulate() {
    let out = rnbounds(&["simulate", "--profile", "smoke"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn smoke_simulation_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let start = Instant::now();
    ok(&["simulate", "--seed", "11", "--profile", "smoke", "-o", path(&out)]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "smoke profile took {secs:.1}s");
    let env = json(&out.join("simulation.json"));
    let sizes = env["result"]["sizes"].as_array().unwrap();
    assert_eq!(sizes.len(), 1);
    assert_eq!(sizes[0]["n"], 200);
    assert_eq!(sizes[0]["replications"], 2);
    assert_eq!(data_lines(&out.join("simulation_bands.csv")).len(), 49);
}

#[test]
fn figure_mode_writes_one_panel_per_l() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fig");
    ok(&[
        "simulate", "--seed", "5", "--profile", "study", "--figure-mode", "--replications", "2", "--n-list", "300",
        "--n-large", "2000", "--grid", "-3,3,13", "-o", path(&out),
    ]);
    let figs = out.join("figures");
    for family in ["fig1_bounds", "fig2_upper", "fig3_lower"] {
        let panels: Vec<String> = std::fs::read_dir(&figs)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with(family))
            .collect();
        assert_eq!(panels.len(), 4, "{family}: {panels:?}");
        for l in 2..=5 {
            let file = figs.join(format!("{family}_L{l}.csv"));
            assert_eq!(data_lines(&file).len(), 13, "{}", file.display());
        }
    }
}

#[test]
fn seeded_commands_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("det");
    let runs: [&[&str]; 3] = [
        &["bounds", "--sim-n", "1500", "--sim-l", "3", "--grid", "-2,2,9", "--seed", "9"],
        &["simulate", "--seed", "9", "--profile", "smoke", "--grid", "-2,2,9"],
        &["inference", "--sim-n", "800", "--grid", "-1,1,3", "--draws", "100", "--seed", "9"],
    ];
    for args in runs {
        let mut a: Vec<&str> = args.to_vec();
        a.extend(["-o", path(&out)]);
        ok(&a);
        let first = snapshot(&out);
        ok(&a);
        assert_eq!(first, snapshot(&out), "{args:?}");
        a.extend(["--threads", "1"]);
        ok(&a);
        assert_eq!(first, snapshot(&out), "{args:?} single-threaded");
        std::fs::remove_dir_all(&out).unwrap();
    }
}

#[test]
fn median_qte_interval_contains_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("qte");
    ok(&["qte", "--sim-n", "5000", "--seed", "21", "--quantiles", "0.5", "--grid", "-4,4,161", "-o", path(&out)]);
    let rows = data_lines(&out.join("qte.csv"));
    assert_eq!(rows.len(), 1);
    let (lb, ub): (f64, f64) = (rows[0][4].parse().unwrap(), rows[0][5].parse().unwrap());
    let p = SimParams::default();
    let oracle = treated_quantile_truth(0.5, &p).unwrap() - truth_quantile(0.5, &p).unwrap();
    assert!(lb <= oracle && oracle <= ub, "oracle {oracle} outside [{lb}, {ub}]");
}

#[test]
fn check_on_irrelevant_instrument() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flat.csv");
    std::fs::write(&input, flat_instrument_csv()).unwrap();
    let out = dir.path().join("check");
    ok(&["check", "--input", path(&input), "--grid", "-1,2,7", "-o", path(&out)]);
    let report = &json(&out.join("check.json"))["result"];
    assert_eq!(report["all_slater"], true);
    let points = report["points"].as_array().unwrap();
    assert_eq!(points.len(), 7);
    for p in points {
        assert_eq!(p["slater"], true);
        assert!(p["recession_margin"].as_f64().unwrap().abs() < 1e-12, "{p}");
        assert_eq!(p["upper"]["assumption_r"], "K=1", "{p}");
        assert_eq!(p["lower"]["assumption_r"], "K=1", "{p}");
    }

    ok(&["bounds", "--input", path(&input), "--grid", "-1,2,7", "-o", path(&out)]);
    for r in data_lines(&out.join("bounds.csv")) {
        assert_eq!((r[3].as_str(), r[4].as_str()), ("0.0", "1.0"));
    }
}

#[test]
fn inference_emits_interval_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inf");
    ok(&["inference", "--sim-n", "1000", "--grid", "-1,1,3", "--draws", "100", "--seed", "2", "-o", path(&out)]);
    let rows = data_lines(&out.join("inference.csv"));
    assert_eq!(rows.len(), 6);
    let bounds: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(bounds, ["upper", "lower", "upper", "lower", "upper", "lower"]);
    let env = json(&out.join("inference.json"));
    let results = env["result"].as_array().unwrap();
    assert_eq!(results.len(), 6);
    for r in results {
        assert_eq!(r["method"], "numerical_delta");
        assert!(r["n_draws"].as_u64().unwrap() + r["failed_draws"].as_u64().unwrap() == 100);
    }
    assert_eq!(env["config"]["inference"]["draws"], 100);
    assert_eq!(env["config"]["inference"]["seed"], 2);
}

#[test]
fn dataset_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.csv");
    std::fs::write(&input, "outcome,treat,inst,age\n1.5,1,2,30\n0.5,0,2,41\n2.5,1,5,25\n-0.5,0,5,52\n3,1,2,33\n").unwrap();
    let out = dir.path().join("dump");
    ok(&[
        "dataset-dump", "--input", path(&input), "--y-col", "outcome", "--d-col", "treat", "--z-col", "inst", "--x-cols", "age",
        "-o", path(&out),
    ]);
    let cols = rnbounds::dataset::ColumnMap { y: "outcome".into(), d: "treat".into(), z: "inst".into(), x: vec!["age".into()] };
    let original = rnbounds::dataset::Dataset::load_csv(&input, &cols, None).unwrap();
    let dumped = rnbounds::dataset::Dataset::load_csv(out.join("dataset.csv"), &original.dump_columns(), None).unwrap();
    assert_eq!(original, dumped);
    let summary = &json(&out.join("dataset.json"))["result"];
    assert_eq!(summary["observations"], 5);
    assert_eq!(summary["instrument_support"], serde_json::json!([2.0, 5.0]));
}

#[test]
fn bad_flags_are_config_errors() {
    let last_line = |out: Output| -> Value {
        serde_json::from_str(String::from_utf8(out.stderr).unwrap().lines().last().unwrap()).unwrap()
    };
    let out = rnbounds(&["bounds", "--sim-n", "100", "--tau=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_line(out)["kind"], "config");
    let out = rnbounds(&["bounds"]);
    assert_eq!(out.status.code(), Some(1));
    let out = rnbounds(&["bounds", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_line(out)["kind"], "usage");
    assert_eq!(rnbounds(&["--version"]).status.code(), Some(0));
}
