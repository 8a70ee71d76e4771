use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "numerics": {
    "grid_min": -400.0,
    "grid_max": 1400.0,
    "grid_step": 50.0,
    "mar_samples": 20000,
    "bs_select_samples": 500,
    "phase_nodes": 16,
    "throughput_phase_nodes": 8,
    "hermite_nodes": 11
  }
}"#;

fn locrel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locrel"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analytic_prints_closed_forms() {
    let dir = TempDir::new().unwrap();
    let o = locrel(dir.path(), &["analytic", "--x", "300", "--k", "0.25"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let value = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}: ")))
            .unwrap_or_else(|| panic!("no {key} in {text}"))
            .parse()
            .unwrap()
    };
    assert_eq!(value("x_m"), 300.0);
    assert_eq!(value("edge_approx"), 150.0);
    assert!((value("psi") / 2097.3 - 1.0).abs() < 1e-3);
    assert!((value("psi_prime") / 47.69 - 1.0).abs() < 1e-3);
}

#[test]
fn selftest_passes() {
    let dir = TempDir::new().unwrap();
    let o = locrel(dir.path(), &["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn bad_config_exits_with_validation_code() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"n_subcarriers": 0}"#).unwrap();
    let o = locrel(dir.path(), &["--config", "bad.json", "analytic", "--x", "300"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("typo.json"), r#"{"n_subcarrier": 600}"#).unwrap();
    let o = locrel(dir.path(), &["--config", "typo.json", "analytic", "--x", "300"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn out_of_domain_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let o = locrel(dir.path(), &["analytic", "--x", "300", "--k", "1.5"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn map_build_and_query() {
    let dir = small_workspace();
    let o = locrel(dir.path(), &["--config", "small.json", "map", "build"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/map.json").exists());

    let o = locrel(
        dir.path(),
        &["--config", "small.json", "map", "query", "--x", "100", "--x", "300", "--rate", "1.0"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    // header plus one row per location
    assert_eq!(rows.len(), 3, "{text}");

    let o = locrel(dir.path(), &["--config", "small.json", "map", "query", "--x", "700", "--bs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("x_m,quantile_bs2,outage_bs2,p_sel2\n"), "{}", stdout(&o));

    // a map built from another configuration is rejected
    let o = locrel(dir.path(), &["map", "query", "--map", "out/map.json", "--x", "100"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn figure_reruns_are_identical() {
    let dir = small_workspace();
    let run = |out: &str| {
        let o = locrel(dir.path(), &["--config", "small.json", "--out", out, "figure", "fig2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a");
    run("b");
    for name in ["fig2_outage.csv", "fig2_edges.csv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between runs");
    }
}

#[test]
fn json_tables_parse() {
    let dir = small_workspace();
    let o = locrel(
        dir.path(),
        &["--config", "small.json", "--format", "json", "crlb-sweep", "--xmin", "100", "--xmax", "900", "--step", "200"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "json"))
        .expect("a json table");
    let table = locrel::runner::ResultTable::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 5);
    assert_eq!(table.column("x_m").unwrap(), vec![100.0, 300.0, 500.0, 700.0, 900.0]);
}

#[test]
fn calibration_record_drives_meta_and_throughput() {
    let dir = small_workspace();
    let o = locrel(dir.path(), &["--config", "small.json", "calibrate", "--scheme", "backoff"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let record = dir.path().join("out/calibration_backoff.json");
    assert!(record.exists());
    let selector = record.to_str().unwrap();

    for (cmd, header) in [("meta", "x_m,meta_prob,meta_bs1,meta_bs2,p_sel1"), ("throughput", "x_m,omega")] {
        let o = locrel(
            dir.path(),
            &["--config", "small.json", cmd, "--selector", selector, "--xmin", "100", "--xmax", "300", "--step", "100"],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(dir.path().join(format!("out/{cmd}.csv"))).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], header);
        assert_eq!(rows.len(), 4);
        assert!(text.contains("# param.scheme: backoff"));
    }

    let o = locrel(dir.path(), &["--config", "small.json", "meta", "--x", "100"]);
    assert_eq!(o.status.code(), Some(2));
}
