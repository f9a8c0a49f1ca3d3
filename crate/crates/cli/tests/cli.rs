use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn necklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_necklab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn check<'a>(rep: &'a Value, name: &str) -> &'a Value {
    rep["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn sphere_three_circle_matches_band_areas() {
    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("sphere_three_circle.conf");
    let o = necklab(&["three-circle", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(out.path().join("segments.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "phi_A").unwrap();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 12);
    for (s, row) in rows.iter().enumerate() {
        let i = (s + 1) as f64;
        // |A|^2 = 2 on the unit sphere; the band between heights tanh(i-1), tanh i has area 2 pi (tanh i - tanh(i-1)).
        let exact = 4.0 * PI * (i.tanh() - (i - 1.0).tanh());
        let got: f64 = row[col].parse().unwrap();
        assert!((got - exact).abs() <= 1e-6, "segment {i}: {got} vs {exact}");
    }

    let rep = report(out.path());
    assert_eq!(rep["meta"]["command"], "three-circle");
    let rate = &rep["results"]["rates"][0];
    assert_eq!(rate["q"], 1.5);
    assert!(rate["i0"].as_u64().is_some());
    assert!(!rate["verdicts"].as_array().unwrap().is_empty());
    for c in rep["checks"].as_array().unwrap() {
        assert!(c["tolerance"].is_number(), "{c}");
        assert!(!c["provenance"].as_str().unwrap().is_empty());
    }
}

#[test]
fn inverted_catenoid_residue_is_flagged_nonzero() {
    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("inverted_catenoid_residues.conf");
    let o = necklab(&["residues", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = report(out.path());
    let axial = check(&rep, "tau1[e3]");
    assert_eq!(axial["expect"], "expected-nonzero");
    assert_eq!(axial["pass"], true);
    assert!(axial["value"].as_f64().unwrap().abs() > axial["tolerance"].as_f64().unwrap());
    assert_eq!(check(&rep, "tau1[e1]")["expect"], "expected-zero");
    assert!(out.path().join("residues.csv").exists());
}

#[test]
fn unknown_key_is_an_input_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "example = sphere\ncolour = red\n").unwrap();
    let out = dir.path().join("out");
    let o = necklab(&["analyze", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    assert!(!out.exists());
}

#[test]
fn missing_surface_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = necklab(&["analyze", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn failed_check_exits_one_and_still_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fit.conf");
    fs::write(
        &cfg,
        "example = sphere\ngrid = 1201, 32\ntrange = 0, 12\nfit_window = 3, 10\nexpect_q = 1.0\nexpect_q_tol = 0.01\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = necklab(&["decay-fit", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let rep = report(&out);
    let q = rep["results"]["q_hat"].as_f64().unwrap();
    assert!((1.98..=2.0).contains(&q), "{q}");
    assert_eq!(check(&rep, "fitted_rate_error")["pass"], false);
    assert!(out.join("decay.csv").exists());
}

#[test]
fn flags_override_config_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("sphere_three_circle.conf");
    let out = dir.path().join("out");
    let o = necklab(&[
        "three-circle",
        "--config",
        cfg.to_str().unwrap(),
        "--L",
        "2",
        "--segments",
        "6",
        "--q",
        "1.0,1.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = report(&out);
    assert_eq!(rep["inputs"]["L"], "2");
    assert_eq!(rep["inputs"]["example"], "sphere");
    assert_eq!(rep["results"]["segments"], 6);
    assert_eq!(rep["results"]["rates"].as_array().unwrap().len(), 2);
}

#[test]
fn harmonic_lab_reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("h.conf");
    fs::write(&cfg, "q = 1.0\ntrials = 100\nk_max = 2\nseed = 7\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = necklab(&["harmonic-lab", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("report.json")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let rep: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(rep["meta"]["seed"], 7);
    assert!(rep["results"]["rates"][0]["empirical_l0"].as_f64().unwrap() > 0.0);
}

#[test]
fn drifting_seed_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.conf");
    fs::write(
        &cfg,
        "example = catenoid\ngrid = 41, 16\ntrange = -2, 2\nperturb_amplitude = 0.05\nperturb_mode = normal_trig\nperturb_k = 2\nperturb_width = 1\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = necklab(&["synthesize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn short_descent_writes_trace_and_final_surface() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.conf");
    fs::write(
        &cfg,
        "example = catenoid\ngrid = 41, 16\ntrange = -2, 2\nrefine = 4\nperturb_amplitude = 0.01\nperturb_width = 1.5\nmax_iter = 5\nfd_checks = 0\ntarget_reduction = 1\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = necklab(&["synthesize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,W,gradnorm,step,defect\n"));
    assert!(trace.lines().count() >= 2);
    assert!(out.join("final.wnl").exists());
    let rep = report(&out);
    assert_eq!(check(&rep, "energy_increases")["pass"], true);
    assert_eq!(check(&rep, "clamped_points_moved")["value"], 0.0);
}
