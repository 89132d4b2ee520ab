use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(cmd: &str, dir: &Path, config: &str) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_polydiff"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap()
}

fn with_out(out: &Path, body: &str) -> String {
    format!("output_dir = {:?}\n{body}", out.to_str().unwrap())
}

fn read_csv(path: PathBuf) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn melnikov_field_has_its_minimum_at_pi_pi() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = run("melnikov", dir.path(), &with_out(&out, "[system]\nmu = 0.02\n[melnikov]\nomega = [1.0]\nn_t = 33\nn_q = 33\n"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(out.join("melnikov_field_w1.csv"));
    assert_eq!(header, ["T0", "Q0", "value"]);
    let min = rows.iter().min_by(|a, b| a[2].total_cmp(&b[2])).unwrap();
    assert!((min[0] - PI).abs() < 0.2 && (min[1] - PI).abs() < 0.2, "{min:?}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(out.join("certificates.json").exists());
}

#[test]
fn flat_coupling_violates_condition_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z");
    let o = run("melnikov", dir.path(), &with_out(&out, "[system]\nmu = 0.02\nperturbation = \"zero\"\n"));
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CONDITION1_VIOLATED"));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"exit_code\": 3"));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("loop", dir.path(), "[system]\nmu = 0.02\n[loop]\nT_zero = 1.0\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("T_zero"));
    let o = run("loop", dir.path(), "[system]\nmu = \"small\"\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mu"));
}

#[test]
fn unperturbed_loop_matches_the_separatrix() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a/b/c");
    let o = run(
        "loop",
        dir.path(),
        &with_out(&out, "[system]\nmu = 0.0\n[loop]\nT0 = 0.0\nT1 = 40.0\nQ0 = 0.0\nomega = 1.5\n"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(out.join("loop_curve.csv"));
    assert_eq!(header, ["t", "q", "Q"]);
    let mut worst: f64 = 0.0;
    for r in &rows {
        let (t, q, rotor) = (r[0], r[1], r[2]);
        // Incoming branch from the apex at t = 0, outgoing branch to t = 40.
        let exact = if t < 20.0 { -4.0 * (-t).exp().atan() } else { 4.0 * (t - 40.0).exp().atan() };
        worst = worst.max((q - exact).abs());
        assert!((rotor - 1.5 * t).abs() < 1e-9);
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[system]\nmu = 0.05\n[loop]\nomega = 1.2\n";
    let a = dir.path().join("r1");
    let b = dir.path().join("r2");
    assert!(run("loop", dir.path(), &with_out(&a, body)).status.success());
    assert!(run("loop", dir.path(), &with_out(&b, body)).status.success());
    assert_eq!(fs::read(a.join("loop_curve.csv")).unwrap(), fs::read(b.join("loop_curve.csv")).unwrap());
    assert_eq!(fs::read(a.join("loop_report.json")).unwrap(), fs::read(b.join("loop_report.json")).unwrap());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run("loop", dir.path(), &with_out(&blocker.join("sub"), "[system]\nmu = 0.05\n"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("I/O error"));
}

#[test]
fn transition_writes_record_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let body = "seed = 5\n[system]\nmu = 0.02\n[transition]\nomega1 = 1.0\nomega2 = 1.02\nregression_grid = 3\nprojection_samples = 4\n";
    let o = run("transition", dir.path(), &with_out(&out, body));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("transition_record.json")).unwrap()).unwrap();
    assert!(rec["boundary_margin"].as_f64().unwrap() > 0.0);
    let (_, rows) = read_csv(out.join("fy_regression.csv"));
    assert_eq!(rows.len(), 9);
    let (header, rows) = read_csv(out.join("projection_check.csv"));
    assert_eq!(header, ["F", "F_projected", "difference"]);
    assert!(rows.iter().all(|r| r[2] >= -1e-6));
}

#[test]
fn diffuse_and_scaling_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let body = "[system]\nmu = 0.05\n[diffuse]\nomega_start = 1.0\nomega_end = 1.1\n";
    let o = run("diffuse", dir.path(), &with_out(&out, body));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diffusion_report.json")).unwrap()).unwrap();
    assert_eq!(rep["omega_chain"].as_array().unwrap().len(), 3);
    assert!(rep["Qdot_start"].as_f64().unwrap() <= 1.0);
    assert!(out.join("diffusion_curve.csv").exists());

    let out = dir.path().join("s");
    let body = "[system]\nmu = 0.05\n[scaling]\nmu = [0.1, 0.07, 0.05]\nomega_start = 1.0\nomega_end = 1.1\n[scaling.options]\nqdot_low = 1.0\nqdot_high = 1.1\n";
    let o = run("scaling", dir.path(), &with_out(&out, body));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("fitted exponent p"));
    let text = fs::read_to_string(out.join("scaling.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "mu,t_d,p_partial,status");
    assert_eq!(lines.filter(|l| l.ends_with(",ok")).count(), 3);
}
