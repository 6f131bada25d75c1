use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_msziarmn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sim_config(variant: &str, n: usize, t: usize) -> String {
    format!(
        r#"schema_version = 1
variant = "{variant}"
output_dir = "sim"

[[covariates]]
part = "x"
source = {{ kind = "external", column = "temp" }}

[[covariates]]
part = "z"
source = {{ kind = "external", column = "rain" }}
shared = true

[sampler]
chains = 2
iterations = 400
burn_in = 200
thin = 2
seed = 7

[report]
fitted = true
rate_ratios = true
curves = [{{ disease = "zika", covariate = "temp", from = -2.0, to = 2.0, points = 9, threshold = 1.0 }}]

[simulate]
diseases = ["dengue", "zika", "chik"]
n_areas = {n}
n_times = {t}
covariates = ["temp", "rain"]
totals = {{ rule = "negative-binomial", mean = 12.0, size = 3.0 }}

[simulate.truth]
zeta = [0.5, 0.6, 0.4]
alpha0 = [0.2, -0.3]
alpha = [0.4, -0.3]
eta0 = [-0.5, -0.5]
rho_ar = [2.0, 2.0]
"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn simulate(dir: &Path, variant: &str, n: usize, t: usize) -> PathBuf {
    let cfg = write(dir, "sim.toml", &sim_config(variant, n, t));
    let o = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("sim")
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn waic_value(p: &Path) -> f64 {
    let v: serde_json::Value = serde_json::from_slice(&read(p)).unwrap();
    v["waic"].as_f64().unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let da = simulate(a.path(), "ms-ziarmn", 5, 8);
    let db = simulate(b.path(), "ms-ziarmn", 5, 8);
    for f in ["counts.csv", "covariates.csv", "truth.json", "manifest.json", "fit.toml"] {
        assert_eq!(read(&da.join(f)), read(&db.join(f)), "{f} differs");
    }
    let truth: serde_json::Value = serde_json::from_slice(&read(&da.join("truth.json"))).unwrap();
    assert_eq!(truth["states"].as_array().unwrap().len(), 5);
}

#[test]
fn armn_truth_has_no_states() {
    let d = TempDir::new().unwrap();
    let out = simulate(d.path(), "armn", 4, 6);
    let truth: serde_json::Value = serde_json::from_slice(&read(&out.join("truth.json"))).unwrap();
    assert!(truth.get("states").is_none());
    assert!(truth["parameters"].as_array().unwrap().len() > 5);
}

#[test]
fn fit_waic_and_summarize_round_trip() {
    let d = TempDir::new().unwrap();
    let sim = simulate(d.path(), "ms-ziarmn", 6, 10);
    let cfg = sim.join("fit.toml");
    let o = run(&["fit", "--config", cfg.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = sim.join("fit");
    for f in [
        "draws.csv",
        "phi.csv",
        "states.csv",
        "cell_loglik.csv",
        "acceptance.csv",
        "summary.csv",
        "rate_ratios.csv",
        "diagnostics.csv",
        "presence.csv",
        "lambda_bar.csv",
        "fitted.csv",
        "waic.json",
        "waic_cells.csv",
        "curve_zika_temp.csv",
        "crossings.csv",
        "manifest.json",
    ] {
        assert!(fit.join(f).is_file(), "missing {f}");
    }
    let curve = String::from_utf8(read(&fit.join("curve_zika_temp.csv"))).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "value,mean,lower,upper");
    assert_eq!(curve.lines().count(), 10);

    let o = run(&["waic", "--config", cfg.to_str().unwrap(), "--draws", fit.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fitted = waic_value(&fit.join("waic.json"));
    let recomputed = waic_value(&fit.join("report/waic.json"));
    assert!((fitted - recomputed).abs() < 1e-10, "{fitted} vs {recomputed}");

    let o = run(&["summarize", "--config", cfg.to_str().unwrap(), "--draws", fit.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(&fit.join("summary.csv")), read(&fit.join("report/summary.csv")));
    assert_eq!(read(&fit.join("presence.csv")), read(&fit.join("report/presence.csv")));

    // a repeated fit reproduces every byte
    let again = d.path().join("again");
    let o = run(&["fit", "--config", cfg.to_str().unwrap(), "--output-dir", again.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["draws.csv", "phi.csv", "states.csv", "summary.csv", "waic.json", "fitted.csv", "manifest.json"] {
        assert_eq!(read(&fit.join(f)), read(&again.join(f)), "{f} differs");
    }

    // changed data is refused
    let counts = sim.join("counts.csv");
    let mut text = String::from_utf8(read(&counts)).unwrap();
    text = text.replacen(",1,", ",1, ", 1);
    fs::write(&counts, text).unwrap();
    let o = run(&["waic", "--config", cfg.to_str().unwrap(), "--draws", fit.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("differ"), "{}", stderr(&o));
}

#[test]
fn every_variant_fits_and_reports_waic() {
    let d = TempDir::new().unwrap();
    let sim = simulate(d.path(), "ms-ziarmn", 5, 8);
    let cfg = sim.join("fit.toml");
    let mut values = Vec::new();
    for v in ["ms-ziarmn", "ziarmn", "zeng", "armn"] {
        let out = d.path().join(v);
        let o = run(&["fit", "--config", cfg.to_str().unwrap(), "--variant", v, "--output-dir", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{v}: {}", stderr(&o));
        values.push(waic_value(&out.join("waic.json")));
        assert_eq!(out.join("states.csv").is_file(), v != "armn");
    }
    assert!(values.iter().all(|w| w.is_finite()));
}

#[test]
fn strict_mode_flags_non_convergence() {
    let d = TempDir::new().unwrap();
    let sim = simulate(d.path(), "ms-ziarmn", 4, 6);
    let text = String::from_utf8(read(&sim.join("fit.toml"))).unwrap();
    let text = text
        .replace("iterations = 400", "iterations = 12")
        .replace("burn_in = 200", "burn_in = 6")
        .replace("thin = 2", "thin = 1")
        .replace("[report]", "[report]\nrhat_threshold = 1.0");
    let cfg = write(&sim, "short.toml", &text);
    let o = run(&["fit", "--config", cfg.to_str().unwrap(), "--strict"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("not converged"));
    let o = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn invalid_inputs_exit_with_validation_status() {
    let d = TempDir::new().unwrap();
    let counts = write(
        d.path(),
        "counts.csv",
        "disease,area,time,count\nd1,a,1,3\nd2,a,1,0\nd1,a,2,1\nd2,a,2,x\n",
    );
    let cfg = write(d.path(), "c.toml", "schema_version = 1\n[data]\ncounts = \"counts.csv\"\n");
    let o = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));

    fs::write(&counts, "disease,area,time,count\nd1,a,1,3\nd2,a,1,0\nd1,a,2,1\n").unwrap();
    let o = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("disease 2, area 1, time 2"), "{}", stderr(&o));

    let cfg = write(d.path(), "bad.toml", "schema_version = 1\nchainz = 2\n[data]\ncounts = \"counts.csv\"\n");
    let o = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("chainz"), "{}", stderr(&o));

    let cfg = write(d.path(), "missing.toml", "schema_version = 1\n[data]\ncounts = \"nope.csv\"\n");
    let o = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not exist"), "{}", stderr(&o));
}

#[test]
fn full_size_panel_round_trips_into_fit() {
    let d = TempDir::new().unwrap();
    let sim = simulate(d.path(), "ms-ziarmn", 160, 52);
    let text = String::from_utf8(read(&sim.join("fit.toml"))).unwrap();
    let text = text
        .replace("chains = 2", "chains = 1")
        .replace("iterations = 400", "iterations = 4")
        .replace("burn_in = 200", "burn_in = 2")
        .replace("thin = 2", "thin = 1")
        .replace("fitted = true", "fitted = false");
    let cfg = write(&sim, "quick.toml", &text);
    let o = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let states = String::from_utf8(read(&sim.join("fit/states.csv"))).unwrap();
    assert_eq!(states.lines().next().unwrap().matches("state[").count(), 160 * 52);
}
