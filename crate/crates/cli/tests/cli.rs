use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn examples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples")
}

fn cocycle(args: &[&str], out: &Path, envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cocycle"));
    cmd.args(args).arg("--out").arg(out).env_remove("COCYCLE_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn run_example(file: &str, args: &[&str], out: &Path) -> Output {
    let config = examples().join(file);
    let mut all = vec!["--config", config.to_str().unwrap()];
    all.extend_from_slice(args);
    cocycle(&all, out, &[])
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn stage<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["stages"].as_array().unwrap().iter().find(|s| s["stage"] == name).map(|s| &s["result"]).unwrap()
}

/// Every shipped example with its subcommand and expected exit code.
const EXAMPLES: &[(&str, &[&str], i32)] = &[
    ("c01_rotation_fixed_point.toml", &["reduce"], 0),
    ("c02_positive_solution.toml", &["reduce"], 0),
    ("c04_shear_eps05.toml", &["reduce"], 0),
    ("c04_shear_eps02.toml", &["reduce"], 0),
    ("c06_elliptic_schrodinger.toml", &["reduce"], 0),
    ("c06_elliptic_schrodinger.toml", &["exponents"], 0),
    ("c07_scaled_shear.toml", &["conformalize", "--mode", "constant"], 0),
    ("c08_conformal_function.toml", &["conformalize", "--mode", "function"], 0),
    ("c09_line_plus_plane.toml", &["pipeline", "--mode", "uniquely-ergodic"], 0),
    ("c10_two_conformal_blocks.toml", &["pipeline", "--mode", "minimal"], 0),
    ("c11_rotation_no_splitting.toml", &["pipeline", "--mode", "uniquely-ergodic"], 0),
    ("c11_rotation_no_splitting.toml", &["split"], 0),
    ("c11_rotation_forced_cut.toml", &["split"], 3),
    ("c12_shear_sweep.toml", &["sweep", "--param", "epsilon"], 0),
    ("diag_hyperbolic.toml", &["exponents"], 0),
    ("diag_hyperbolic.toml", &["sweep", "--param", "horizon"], 0),
    ("rotation_golden.toml", &["exponents"], 0),
    ("rotation_golden.toml", &["reduce"], 0),
    ("skewed_blocks_split.toml", &["split"], 0),
    ("shift_shear.toml", &["exponents"], 0),
    ("shift_shear.toml", &["reduce"], 0),
];

#[test]
fn every_example_exits_as_expected() {
    let dir = tempfile::tempdir().unwrap();
    for (i, (file, args, code)) in EXAMPLES.iter().enumerate() {
        let out = run_example(file, args, &dir.path().join(i.to_string()));
        assert_eq!(out.status.code(), Some(*code), "{file} {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn shipped_examples_are_all_listed() {
    let mut listed: Vec<&str> = EXAMPLES.iter().map(|e| e.0).collect();
    listed.dedup();
    let mut files: Vec<String> = std::fs::read_dir(examples())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f.ends_with(".toml"))
        .collect();
    files.sort();
    let mut listed: Vec<String> = listed.into_iter().map(String::from).collect();
    listed.sort();
    listed.dedup();
    assert_eq!(files, listed);
}

#[test]
fn missing_base_kind_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[base]\nperiod = 1\n\n[cocycle]\nkind = \"rotation\"\ntheta = 0.1\n").unwrap();
    let out = cocycle(&["--config", cfg.to_str().unwrap(), "exponents"], &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`base`") && err.contains("kind"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_keys_and_missing_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[base]\nkind = \"periodic\"\nperiod = 1\n[cocycle]\nkind = \"rotation\"\ntheta = 0.1\ncolour = 1\n").unwrap();
    let out = cocycle(&["--config", cfg.to_str().unwrap(), "reduce"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    assert_eq!(cocycle(&["reduce"], dir.path(), &[]).status.code(), Some(2));
    assert_eq!(cocycle(&["frobnicate"], dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn single_value_sweep_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_example("c12_shear_sweep.toml", &["sweep", "--param", "epsilon", "--values", "0.3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least two"));
}

#[test]
fn epsilon_sweep_csv_has_header_and_decreasing_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_example("c12_shear_sweep.toml", &["sweep", "--param", "epsilon", "--values", "0.5,0.2,0.1"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep_epsilon.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..4], ["value", "perturbation_size", "invariance_residual", "orthogonality_defect"]);
    let sizes: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(sizes.len(), 3);
    assert!(sizes.windows(2).all(|w| w[1] < w[0]), "{sizes:?}");
}

#[test]
fn horizon_sweep_rate_converges_to_log_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_example("diag_hyperbolic.toml", &["sweep", "--param", "horizon"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep_horizon.csv")).unwrap();
    let last = rdr.records().last().unwrap().unwrap();
    let rate: f64 = last[3].parse().unwrap();
    assert!((rate - 4f64.ln()).abs() < 1e-12, "{rate}");
}

#[test]
fn exponent_reports() {
    let dir = tempfile::tempdir().unwrap();
    run_example("diag_hyperbolic.toml", &["exponents"], &dir.path().join("d"));
    let rep = read_json(&dir.path().join("d/exponents.json"));
    let e = stage(&rep, "exponents");
    assert!((e["lambda_plus_est"].as_f64().unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!((e["lambda_minus_est"].as_f64().unwrap() + 2f64.ln()).abs() < 1e-12);

    run_example("rotation_golden.toml", &["exponents"], &dir.path().join("r"));
    let rep = read_json(&dir.path().join("r/exponents.json"));
    let e = stage(&rep, "exponents");
    assert!(e["lambda_plus_est"].as_f64().unwrap().abs() < 1e-12);
    assert!(e["lambda_minus_est"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn rotation_reduction_is_trivial_and_full_output_has_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_example("rotation_golden.toml", &["reduce", "--full"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let rep = read_json(&dir.path().join("reduce.json"));
    assert!(stage(&rep, "reduction")["perturbation_size"].as_f64().unwrap() < 1e-12);
    let points = rep["points"].as_array().unwrap();
    assert_eq!(points.len(), 16);
    for p in points {
        let m = p["p"].as_array().unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, x) in row.as_array().unwrap().iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((x.as_f64().unwrap() - id).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shear_report_checks_eigenvalue_moduli() {
    let dir = tempfile::tempdir().unwrap();
    run_example("c04_shear_eps05.toml", &["reduce"], dir.path());
    let rep = read_json(&dir.path().join("reduce.json"));
    assert_eq!(rep["verdicts"].as_array().unwrap().iter().find(|v| v["name"] == "return_eigenvalue_moduli").unwrap()["passed"], true);
    assert!(stage(&rep, "return_spectrum")["modulus_gap"].as_f64().unwrap() < 1e-8);
}

#[test]
fn block_pipeline_reports_partition_and_rates() {
    let dir = tempfile::tempdir().unwrap();
    run_example("c09_line_plus_plane.toml", &["pipeline", "--mode", "uniquely-ergodic"], dir.path());
    let rep = read_json(&dir.path().join("pipeline.json"));
    let p = stage(&rep, "pipeline");
    assert_eq!(p["partition"], serde_json::json!([1, 2]));
    let lambdas: Vec<f64> = p["bundles"].as_array().unwrap().iter().map(|b| b["lambda"].as_f64().unwrap()).collect();
    assert!((lambdas[0] - 2f64.ln()).abs() < 1e-12 && (lambdas[1] + 2f64.ln()).abs() < 1e-12);
    let csv = std::fs::read_to_string(dir.path().join("gap_profile.csv")).unwrap();
    assert!(csv.starts_with("horizon,index,min_ratio\n"));
}

#[test]
fn forced_cut_error_is_embedded_in_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_example("c11_rotation_forced_cut.toml", &["split"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let rep = read_json(&dir.path().join("split.json"));
    assert_eq!(rep["error"]["stage"], "bundles");
    assert!(rep["error"]["message"].as_str().unwrap().contains("increase the bundle horizon"));
    assert_eq!(rep["passed"], false);
}

#[test]
fn overrides_are_echoed_and_tolerances_recorded() {
    let dir = tempfile::tempdir().unwrap();
    run_example("c04_shear_eps02.toml", &["reduce", "--seed", "17", "--strict"], dir.path());
    let rep = read_json(&dir.path().join("reduce.json"));
    assert_eq!(rep["config"]["sampling"]["seed"], 17);
    assert_eq!(rep["config"]["norm"]["strict"], true);
    let tol = &rep["config"]["tolerances"];
    assert_eq!(tol["invariance_residual"], 1e-10);
    assert_eq!(tol["orthogonality_defect"], 1e-8);
    assert_eq!(tol["eigenvalue_modulus"], 1e-8);
    assert!(dir.path().join("reduce.timings.json").exists());
    assert!(rep.get("timings").is_none());
}

#[test]
fn reports_are_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = examples().join("c10_two_conformal_blocks.toml");
    let args = ["--config", config.to_str().unwrap(), "pipeline", "--mode", "minimal", "--full"];
    let a = cocycle(&args, &dir.path().join("a"), &[]);
    let b = cocycle(&args, &dir.path().join("b"), &[("COCYCLE_THREADS", "1")]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    for f in ["pipeline.json", "gap_profile.csv"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = examples().join("c01_rotation_fixed_point.toml");
    let out = cocycle(&["--config", config.to_str().unwrap(), "reduce"], dir.path(), &[("COCYCLE_THREADS", "zero")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn published_schema_matches_the_config_types() {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/config.schema.json");
    let published: Value = read_json(&file);
    assert_eq!(published, cocycle_cli::config::schema());
}
