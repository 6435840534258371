use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cda-nse")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r.records().map(|x| x.unwrap()[idx].to_string()).collect()
}

#[test]
fn condition_report_with_forced_norm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{ "experiment": "condition_report", "h": [0.25], "H": [0.5], "Re": [1],
             "mu": [1], "f_dual_norm": 0.5 }"#,
    );
    let out = dir.path().join("out");
    let o = run(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.join("results.csv").exists());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let cond = &report["cells"][0]["condition"];
    assert_eq!(cond["alpha"], 0.5);
    assert_eq!(cond["small_data"], true);
    assert_eq!(cond["h_max_2d"], "inf");
    assert_eq!(cond["constants"]["constants"], "nominal");
}

#[test]
fn mms_convergence_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "m.json",
        r#"{ "experiment": "mms_convergence", "h": [0.125, 0.0625, 0.03125], "Re": [1] }"#,
    );
    let out = dir.path().join("out");
    let o = run(&["run", &cfg, "--out", out.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = out.join("results.csv");
    assert_eq!(csv_rows(&csv).len(), 3);
    let rates: Vec<String> = column(&csv, "rate_L2_u");
    assert_eq!(rates.iter().filter(|r| !r.is_empty()).count(), 2);
    for r in rates.iter().filter(|r| !r.is_empty()) {
        assert!(r.parse::<f64>().unwrap() > 2.7);
    }
    let first = std::fs::read_to_string(&csv).unwrap();
    assert!(first.starts_with("# "));
}

#[test]
fn invalid_config_reports_line_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        "{\n  \"experiment\": \"cda_sweep\",\n  \"h\": [0.0625],\n  \"H\": [],\n  \"Re\": [10]\n}\n",
    );
    let o = run(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json:4:"), "{}", stderr(&o));

    let typo = write(dir.path(), "typo.json", "{\n  \"experiment\": \"mms_convergence\",\n  \"h\": [0.5],\n  \"solver\": {\n    \"tol\": 1\n  }\n}\n");
    let o = run(&["run", &typo]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("typo.json:5:"), "{}", stderr(&o));
    assert!(stderr(&o).contains("tol"), "{}", stderr(&o));

    let syntax = write(dir.path(), "syntax.json", "{\n  \"experiment\": \"mms_convergence\",\n  \"h\": [0.5,]\n}\n");
    let o = run(&["run", &syntax]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("syntax.json:3:"), "{}", stderr(&o));

    let bad_h = write(dir.path(), "h.json", r#"{ "experiment": "mms_convergence", "h": [0.3] }"#);
    assert_eq!(run(&["run", &bad_h]).status.code(), Some(2));

    let missing_obs = write(
        dir.path(),
        "obs.json",
        r#"{ "experiment": "cda_sweep", "h": [0.25], "H": [0.5], "observations": "/nonexistent/obs.csv" }"#,
    );
    assert_eq!(run(&["run", &missing_obs]).status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let cfg = write(dir.path(), "m.json", r#"{ "experiment": "mms_convergence", "h": [0.5] }"#);
    let blocker = write(dir.path(), "file", "not a directory");
    let o = run(&["run", &cfg, "--out", &blocker]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn overrides_and_mu_min_multiples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{ "experiment": "cda_sweep", "h": [0.125], "H": [0.5, 0.25], "Re": [1],
             "mu": [{ "mu_min_multiple": 10 }] }"#,
    );
    let out = dir.path().join("out");
    let o = run(&["run", &cfg, "--out", out.to_str().unwrap(), "--set", "Re=[2]", "--set", "solver.max_iter=50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = out.join("results.csv");
    assert!(column(&csv, "Re").iter().all(|r| r == "2.0"));
    let mu: Vec<f64> = column(&csv, "mu").iter().map(|x| x.parse().unwrap()).collect();
    let mu_min: Vec<f64> = column(&csv, "mu_min").iter().map(|x| x.parse().unwrap()).collect();
    for (a, b) in mu.iter().zip(&mu_min) {
        assert!((a - 10.0 * b).abs() <= 1e-12 * a);
    }
    // mu_min scales like H^-2 for fixed C_I
    assert!(mu_min[1] > 3.5 * mu_min[0]);
    assert!(column(&csv, "converged").iter().all(|c| c == "true"));
    assert!(column(&csv, "status").iter().all(|c| c == "ok"));

    let o = run(&["run", &cfg, "--set", "solver.damping=2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--set"), "{}", stderr(&o));
    assert_eq!(run(&["run", &cfg, "--set", "nokey"]).status.code(), Some(2));
}

#[test]
fn observation_file_drives_the_nudging() {
    use cda_nse::mesh::unit_square;
    use cda_nse::mms::paper_solution;
    use cda_nse::observation::write_observation_csv;

    let dir = tempfile::tempdir().unwrap();
    let coarse = unit_square(2).unwrap();
    let sol = paper_solution();
    let nv = coarse.vertex_count();
    let mut values = vec![0.0; 2 * nv];
    for (j, &p) in coarse.vertices.iter().enumerate() {
        let u = sol.velocity(p);
        values[j] = u[0];
        values[nv + j] = u[1];
    }
    let obs = dir.path().join("obs.csv");
    write_observation_csv(&obs, &coarse, &values).unwrap();
    let cfg = write(
        dir.path(),
        "o.json",
        &format!(
            r#"{{ "experiment": "cda_sweep", "h": [0.125], "H": [0.5, 0.25], "Re": [1], "mu": [100],
                 "observations": "{}", "vtk": true }}"#,
            obs.display()
        ),
    );
    let out = dir.path().join("out");
    let o = run(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let status = column(&out.join("results.csv"), "status");
    // the file matches the H = 1/2 nodes only; the other cell records the mismatch
    assert_eq!(status, vec!["ok".to_string(), "error".to_string()]);
    assert!(out.join("cell_0000.vtk").exists());
}

#[test]
fn uniqueness_rows_cover_all_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "u.json",
        r#"{ "experiment": "uniqueness_test", "h": [0.125], "H": [0.25], "Re": [10],
             "mu": [0, 50], "seed": 9 }"#,
    );
    let out = dir.path().join("out");
    let o = run(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = out.join("results.csv");
    assert_eq!(csv_rows(&csv).len(), 6);
    for d in column(&csv, "h1_distance") {
        assert!(d.parse::<f64>().unwrap() < 1e-8);
    }
}
