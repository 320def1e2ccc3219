use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ipscale(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipscale"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn read_column(p: &Path) -> Vec<f64> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

fn two_by_two(dir: &Path) {
    fs::write(dir.join("t.csv"), "A,B,count\n0,0,10\n0,1,20\n1,0,50\n1,1,20\n").unwrap();
    fs::write(
        dir.join("s.json"),
        r#"{"factors":[{"name":"A","levels":2},{"name":"B","levels":2}],"order":1}"#,
    )
    .unwrap();
}

#[test]
fn fit_two_by_two_gives_the_independence_table() {
    let d = TempDir::new().unwrap();
    two_by_two(d.path());
    let out = ipscale(&["fit", "--table", "t.csv", "--schema", "s.json", "--solver", "ips", "--eps-tol", "1e-12", "--out", "o"], d.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mu = read_column(&d.path().join("o/mu.csv"));
    for (m, e) in mu.iter().zip([18.0, 12.0, 42.0, 28.0]) {
        assert!((m - e).abs() < 1e-6, "{mu:?}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema"], 1);
    assert_eq!(summary["termination"], "TOL_REACHED");
    assert!(summary["g2"].as_f64().unwrap() > 0.0);
    let beta = fs::read_to_string(d.path().join("o/beta.csv")).unwrap();
    assert!(beta.starts_with("column_label,estimate\n(Intercept),"));
}

#[test]
fn seeded_runs_are_identical() {
    let d = TempDir::new().unwrap();
    two_by_two(d.path());
    for o in ["a", "b"] {
        let out = ipscale(
            &["fit", "--table", "t.csv", "--schema", "s.json", "--solver", "a-ips", "--seed", "7", "--clock", "iterations", "--out", o],
            d.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    for f in ["beta.csv", "mu.csv", "trace.csv"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn l1_at_zero_penalty_matches_ips() {
    let d = TempDir::new().unwrap();
    two_by_two(d.path());
    for (solver, o) in [("ips", "a"), ("l1-ips", "b")] {
        let out = ipscale(
            &["fit", "--table", "t.csv", "--schema", "s.json", "--solver", solver, "--lambda", "0", "--clock", "iterations", "--out", o],
            d.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    for f in ["beta.csv", "mu.csv", "trace.csv"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn iteration_limit_exits_with_three() {
    let d = TempDir::new().unwrap();
    two_by_two(d.path());
    let out = ipscale(&["fit", "--table", "t.csv", "--schema", "s.json", "--eps-tol", "1e-14", "--max-iters", "2", "--out", "o"], d.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(d.path().join("o/summary.json").exists());
}

#[test]
fn triplet_input_and_malformed_csv() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("x.csv"), "row,col,value\n0,0,1\n1,0,1\n1,1,1\n").unwrap();
    fs::write(d.path().join("n.csv"), "count\n3\n5\n").unwrap();
    let out = ipscale(&["fit", "--design", "x.csv", "--counts", "n.csv", "--eps-tol", "1e-12", "--out", "o"], d.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mu = read_column(&d.path().join("o/mu.csv"));
    assert!((mu[0] - 3.0).abs() < 1e-9 && (mu[1] - 5.0).abs() < 1e-9, "{mu:?}");

    fs::write(d.path().join("bad.csv"), "A,B,count\n0,0,1\n0,x,2\n").unwrap();
    fs::write(
        d.path().join("s.json"),
        r#"{"factors":[{"name":"A","levels":2},{"name":"B","levels":2}],"order":1}"#,
    )
    .unwrap();
    let out = ipscale(&["fit", "--table", "bad.csv", "--schema", "s.json", "--out", "o2"], d.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

fn write_rake_inputs(dir: &Path, seed: [f64; 4]) {
    let mut s = String::from("A,B,count\n");
    for (k, v) in seed.iter().enumerate() {
        s += &format!("{},{},{v}\n", k / 2, k % 2);
    }
    fs::write(dir.join("seed.csv"), s).unwrap();
}

#[test]
fn raking_uniform_seed_gives_the_independence_table() {
    let d = TempDir::new().unwrap();
    write_rake_inputs(d.path(), [1.0; 4]);
    fs::write(d.path().join("rows.csv"), "A,target\n0,3\n1,1\n").unwrap();
    fs::write(d.path().join("cols.csv"), "B,target\n0,2\n1,2\n").unwrap();
    let out = ipscale(&["rake", "--seed-table", "seed.csv", "--margin", "rows.csv", "--margin", "cols.csv", "--out", "o"], d.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let adj = read_column(&d.path().join("o/adjusted.csv"));
    for (a, e) in adj.iter().zip([1.5, 1.5, 0.5, 0.5]) {
        assert!((a - e).abs() < 1e-10, "{adj:?}");
    }
}

#[test]
fn raking_to_the_seed_margins_is_a_fixed_point() {
    let d = TempDir::new().unwrap();
    let seed = [2.0, 7.0, 1.0, 4.0];
    write_rake_inputs(d.path(), seed);
    fs::write(d.path().join("rows.csv"), "A,target\n0,9\n1,5\n").unwrap();
    fs::write(d.path().join("cols.csv"), "B,target\n0,3\n1,11\n").unwrap();
    let out = ipscale(&["rake", "--seed-table", "seed.csv", "--margin", "rows.csv", "--margin", "cols.csv", "--out", "o"], d.path());
    assert_eq!(out.status.code(), Some(0));
    let adj = read_column(&d.path().join("o/adjusted.csv"));
    for (a, e) in adj.iter().zip(seed) {
        assert!((a - e).abs() < 1e-9 * e, "{adj:?}");
    }
}

#[test]
fn raking_inconsistent_totals_exits_with_three() {
    let d = TempDir::new().unwrap();
    write_rake_inputs(d.path(), [1.0; 4]);
    fs::write(d.path().join("rows.csv"), "A,target\n0,3\n1,1\n").unwrap();
    fs::write(d.path().join("cols.csv"), "B,target\n0,2\n1,3\n").unwrap();
    let out = ipscale(&["rake", "--seed-table", "seed.csv", "--margin", "rows.csv", "--margin", "cols.csv", "--out", "o"], d.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inconsistent"));
}

#[test]
fn path_endpoint_approaches_the_unpenalized_fit() {
    let d = TempDir::new().unwrap();
    two_by_two(d.path());
    let out = ipscale(&["path", "--table", "t.csv", "--schema", "s.json", "--out", "p"], d.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let path = fs::read_to_string(d.path().join("p/path.csv")).unwrap();
    let rows: Vec<Vec<f64>> = path.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 50);
    assert_eq!(rows[0][1], 0.0, "empty support at lambda_max");
    // Closed-form deviance of the independence fit.
    let n = [10.0, 20.0, 50.0, 20.0];
    let mu = [18.0, 12.0, 42.0, 28.0];
    let dev: f64 = 2.0 * n.iter().zip(mu).map(|(a, m): (&f64, f64)| a * (a / m).ln()).sum::<f64>();
    let end = rows.last().unwrap()[2];
    assert!((end - dev).abs() < 1e-3 * dev, "{end} vs {dev}");
    assert!(fs::read_to_string(d.path().join("p/selected.csv")).unwrap().starts_with("column_label,estimate\n"));
}

#[test]
fn gen_is_byte_identical() {
    let d = TempDir::new().unwrap();
    for o in ["a", "b"] {
        let out = ipscale(&["gen", "general", "--n", "1000", "--p", "100", "--seed", "1", "--out", o], d.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["design.csv", "counts.csv", "beta_true.csv"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bench_writes_curves_and_summary() {
    let d = TempDir::new().unwrap();
    let out = ipscale(
        &["bench", "table-moderate", "--scale", "0.1", "--roster", "ips,a-ips,b-ips", "--replications", "2", "--clock", "iterations", "--out", "b"],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["ips.csv", "a-ips.csv", "b-ips.csv", "summary.csv", "report.json"] {
        assert!(d.path().join("b").join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(d.path().join("b/ips.csv")).unwrap();
    let first = curve.lines().nth(1).unwrap();
    assert_eq!(first.split(',').nth(1).unwrap().parse::<f64>().unwrap(), 1.0);
}

#[test]
fn unknown_scenario_lists_valid_names() {
    let d = TempDir::new().unwrap();
    let out = ipscale(&["bench", "no-such", "--out", "b"], d.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("table-moderate") && err.contains("l1-path"), "{err}");
}
