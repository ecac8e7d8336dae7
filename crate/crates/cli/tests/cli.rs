use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn adass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adass")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, scenario: &str, n: usize, n_test: usize, seed: u64) -> Output {
    adass(&[
        "simulate",
        "--scenario",
        scenario,
        "--n",
        &n.to_string(),
        "--n-test",
        &n_test.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path(dir),
    ])
}

fn coefficients(dir: &Path) -> Vec<f64> {
    let text = fs::read_to_string(dir.join("surface.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["coefficients"].as_array().unwrap().iter().map(|c| c.as_f64().unwrap()).collect()
}

#[test]
fn simulate_is_deterministic_and_writes_beta_grid() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(simulate(&a, "mexican_hat", 5, 3, 7).status.success());
    assert!(simulate(&b, "mexican_hat", 5, 3, 7).status.success());
    for f in ["train_x.csv", "train_y.csv", "test_x.csv", "test_y.csv", "beta_grid.csv", "simulation.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("manifest.toml").exists());

    let mut reader = csv::Reader::from_path(a.join("beta_grid.csv")).unwrap();
    let peak = reader
        .records()
        .map(|r| r.unwrap())
        .map(|r| [0, 1, 2].map(|i| r[i].parse::<f64>().unwrap()))
        .find(|[s, t, _]| (s - 0.6).abs() < 1e-9 && (t - 0.6).abs() < 1e-9)
        .unwrap();
    assert!((peak[2] - 8.75775).abs() < 1e-5, "{}", peak[2]);
}

#[test]
fn empty_test_set_has_header_only() {
    let dir = TempDir::new().unwrap();
    assert!(simulate(dir.path(), "rapid_change", 5, 0, 1).status.success());
    assert_eq!(fs::read_to_string(dir.path().join("test_x.csv")).unwrap().trim(), "curve,arg,value");
    assert_eq!(fs::read_to_string(dir.path().join("test_y.csv")).unwrap().trim(), "curve,arg,value");
}

#[test]
fn unknown_scenario_is_reported() {
    let dir = TempDir::new().unwrap();
    let o = simulate(dir.path(), "sombrero", 5, 1, 1);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error code=unknown-scenario:"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_reported() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = adass(&["fit", "--x", path(&missing), "--y", path(&missing), "--out", path(dir.path())]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error code=input-not-found:") && err.contains("nope.csv"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn fit_smoke_then_predict() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    assert!(simulate(&data, "dampened_harmonic", 10, 4, 3).status.success());
    let fit = dir.path().join("fit");
    let o = adass(&[
        "fit",
        "--x",
        path(&data.join("train_x.csv")),
        "--y",
        path(&data.join("train_y.csv")),
        "--method",
        "smooth",
        "--folds",
        "2",
        "--out",
        path(&fit),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["surface.json", "tuning.json", "slices.csv", "grid_search.csv", "manifest.toml"] {
        assert!(fit.join(f).exists(), "{f}");
    }
    let tuning: serde_json::Value = serde_json::from_str(&fs::read_to_string(fit.join("tuning.json")).unwrap()).unwrap();
    assert!(tuning["cv_error"].as_f64().unwrap() > 0.0);

    let pred = dir.path().join("pred");
    let o = adass(&[
        "predict",
        "--surface",
        path(&fit.join("surface.json")),
        "--x",
        path(&data.join("test_x.csv")),
        "--out",
        path(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv::Reader::from_path(pred.join("predictions.csv")).unwrap().records().count();
    assert_eq!(rows, 4 * 101);
}

#[test]
fn zero_gamma_config_matches_smooth_fit() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    assert!(simulate(&data, "rapid_change", 20, 1, 5).status.success());
    let (x, y) = (data.join("train_x.csv"), data.join("train_y.csv"));
    let config = dir.path().join("adaptive.toml");
    fs::write(
        &config,
        format!(
            "[fit]\nx = {:?}\ny = {:?}\nmethod = \"adass\"\nlambda_s = 0.001\nlambda_t = 0.01\ngamma_s = 0.0\ngamma_t = 0.0\n",
            path(&x),
            path(&y)
        ),
    )
    .unwrap();
    let (a, s) = (dir.path().join("adaptive"), dir.path().join("smooth"));
    let o = adass(&["fit", "--config", path(&config), "--out", path(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = adass(&[
        "fit", "--x", path(&x), "--y", path(&y), "--method", "smooth", "--lambda-s", "0.001", "--lambda-t", "0.01",
        "--out", path(&s),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (ca, cs) = (coefficients(&a), coefficients(&s));
    assert_eq!(ca.len(), cs.len());
    let diff = ca.iter().zip(&cs).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn benchmark_shape_and_rerun() {
    let dir = TempDir::new().unwrap();
    let run = |out: &Path| {
        adass(&[
            "benchmark", "--scenario", "mexican_hat", "--n", "30,40", "--replications", "2", "--estimators", "SMOOTH",
            "--n-test", "50", "--seed", "4", "--out", path(out),
        ])
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&a).status.success());
    assert!(run(&b).status.success());
    let aggregate = fs::read_to_string(a.join("aggregate.csv")).unwrap();
    assert_eq!(aggregate, fs::read_to_string(b.join("aggregate.csv")).unwrap());
    let mut reader = csv::Reader::from_path(a.join("aggregate.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let (ni, ei) = (header.iter().position(|h| h == "n").unwrap(), header.iter().position(|h| h == "estimator").unwrap());
    let rows: Vec<(String, String)> = reader.records().map(|r| r.unwrap()).map(|r| (r[ni].to_string(), r[ei].to_string())).collect();
    assert_eq!(rows, vec![("30".into(), "SMOOTH".into()), ("40".into(), "SMOOTH".into())]);
    let reps = csv::Reader::from_path(a.join("replications.csv")).unwrap().records().count();
    assert_eq!(reps, 4);
}

#[test]
fn noiseless_benchmark_recovers_surface() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("noiseless.toml");
    fs::write(
        &config,
        "seed = 2\n[smooth]\nladder_lo = -12.0\nladder_hi = -10.0\n[benchmark]\nscenario = \"dampened_harmonic\"\n\
         sample_sizes = [100]\nreplications = 1\nestimators = [\"SMOOTH\"]\n[benchmark.generation]\nsn_target = 1e12\nn_test = 10\n",
    )
    .unwrap();
    let o = adass(&["benchmark", "--config", path(&config), "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(dir.path().join("replications.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let i = header.iter().position(|h| h == "ise").unwrap();
    let ise: f64 = reader.records().next().unwrap().unwrap()[i].parse().unwrap();
    assert!(ise < 1e-4, "{ise}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[benchmark]\nreplicatons = 3\n").unwrap();
    let o = adass(&["benchmark", "--config", path(&config), "--out", path(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error code=invalid-config:"), "{}", stderr(&o));
}
