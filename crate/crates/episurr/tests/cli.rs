use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn episurr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_episurr"))
        .args(args)
        .env_remove("EPISURR_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = episurr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &["--bundle", "reduced", "--layers", "1", "--width", "8", "--batch", "100", "--lr", "1e-2"];

fn train_small(dir: &Path, iters: &str) {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--iters", iters, "--progress-every", "0", "--out", p(dir)]);
    ok(&args);
}

#[test]
fn training_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_small(&a, "40");
    train_small(&b, "40");
    for f in ["checkpoint.json", "loss.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn manifest_replays_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    train_small(&a, "20");
    let replay = tmp.path().join("replay");
    ok(&["train", "--config", p(&a.join("manifest.json")), "--out", p(&replay)]);
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(replay.join("checkpoint.json")).unwrap());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["resolved_config"]["width"], 8);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn zero_iterations_still_writes_a_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("t");
    train_small(&d, "0");
    let loss = fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(loss.trim(), "iteration,loss");
    episurr::checkpoint::Checkpoint::load_net(&d.join("checkpoint.json"), None).unwrap();
}

#[test]
fn synth_fit_forecast_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (t, s, f, fc) = (tmp.path().join("t"), tmp.path().join("s"), tmp.path().join("f"), tmp.path().join("fc"));
    train_small(&t, "200");
    ok(&["synth", "--out", p(&s)]);
    let obs = fs::read_to_string(s.join("observations.csv")).unwrap();
    assert!(obs.starts_with("t,split,S,I,R\n"));
    assert_eq!(obs.lines().filter(|l| l.contains(",train,")).count(), 16);
    assert_eq!(obs.lines().filter(|l| l.contains(",validation,")).count(), 4);

    let ckpt = t.join("checkpoint.json");
    ok(&["fit", "--checkpoint", p(&ckpt), "--data", p(&s.join("observations.csv")), "--mask", "I", "--iters", "50", "--out", p(&f)]);
    for file in ["fit_result.json", "fitted.csv", "forecast.csv", "plot_data.csv", "loss.csv", "manifest.json"] {
        assert!(f.join(file).exists(), "{file} missing");
    }
    let plot = fs::read_to_string(f.join("plot_data.csv")).unwrap();
    assert!(plot.lines().skip(1).all(|l| l.starts_with("I,")), "mask must restrict plotted compartments");
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.join("fit_result.json")).unwrap()).unwrap();
    let sum: f64 = ["S0", "I0", "R0"].iter().map(|k| fit["fitted"][k].as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-12);

    ok(&["forecast", "--checkpoint", p(&ckpt), "--fit", p(&f.join("fit_result.json")), "--horizon", "35", "--out", p(&fc)]);
    let traj = episurr::csvio::read_trajectory(&fc.join("forecast.csv")).unwrap();
    assert_eq!(*traj.times.last().unwrap(), 35.0);
}

#[test]
fn multi_seed_fit_writes_per_seed_results_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let (t, s, f) = (tmp.path().join("t"), tmp.path().join("s"), tmp.path().join("f"));
    train_small(&t, "50");
    ok(&["synth", "--out", p(&s)]);
    let (ckpt, obs) = (t.join("checkpoint.json"), s.join("observations.csv"));
    let args = ["fit", "--checkpoint", p(&ckpt), "--data", p(&obs)];
    ok(&[&args[..], &["--iters", "20", "--seeds", "3", "--jobs", "2", "--out", p(&f)]].concat());
    for seed in 0..3 {
        assert!(f.join(format!("seed_{seed}/fit_result.json")).exists());
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 3);

    // Parallel and sequential runs agree.
    let g = tmp.path().join("g");
    ok(&[&args[..], &["--iters", "20", "--seeds", "3", "--jobs", "1", "--out", p(&g)]].concat());
    assert_eq!(fs::read(f.join("seed_2/fit_result.json")).unwrap(), fs::read(g.join("seed_2/fit_result.json")).unwrap());
}

#[test]
fn observations_outside_the_time_range_exit_2_with_a_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let (t, s) = (tmp.path().join("t"), tmp.path().join("s"));
    train_small(&t, "0");
    ok(&["synth", "--t-end", "30", "--out", p(&s)]);
    let out = episurr(&["fit", "--checkpoint", p(&t.join("checkpoint.json")), "--data", p(&s.join("observations.csv")), "--out", p(&tmp.path().join("f"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--time-unit-days"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path());
    for args in [
        vec!["train", "--model", "seir", "--out", out],
        vec!["train", "--bundle", "nowhere", "--out", out],
        vec!["train", "--bundle", "reduced", "--batch", "1", "--out", out],
        vec!["synth", "--i0", "0.9", "--r0", "0.2", "--out", out],
        vec!["fit", "--out", out],
        vec!["gradcheck", "--scope", "weights"],
    ] {
        assert_eq!(episurr(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let stdout = ok(&["gradcheck", "--configs", "10", "--seed", "3"]);
    assert_eq!(stdout.matches("PASS").count(), 3);
    let out = episurr(&["gradcheck", "--configs", "3", "--scope", "loss", "--corrupt", "true"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn output_dir_defaults_to_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_episurr"))
        .args(["synth", "--n-points", "10"])
        .env("EPISURR_OUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("synth/observations.csv").exists());
}

#[test]
fn country_fit_from_raw_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path().join("t");
    ok(&["train", "--bundle", "covid", "--layers", "1", "--width", "8", "--batch", "100", "--iters", "20", "--progress-every", "0", "--out", p(&t)]);

    // A slow synthetic outbreak in a population of one million.
    let raw = tmp.path().join("raw.csv");
    let mut text = String::from("date,confirmed,recovered,deaths\n");
    let start = chrono::NaiveDate::from_ymd_opt(2020, 2, 20).unwrap();
    for d in 0..60u64 {
        let date = start + chrono::Days::new(d);
        text.push_str(&format!("{date},{},{},{}\n", 10 + 20 * d, 5 * d, d));
    }
    fs::write(&raw, text).unwrap();
    let cfg = tmp.path().join("country.json");
    fs::write(&cfg, r#"{"name":"testland","population":1000000,"lockdown_end":"2020-04-05"}"#).unwrap();

    let f = tmp.path().join("f");
    ok(&["fit", "--checkpoint", p(&t.join("checkpoint.json")), "--raw", p(&raw), "--country-config", p(&cfg), "--iters", "10", "--out", p(&f)]);
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.join("fit_result.json")).unwrap()).unwrap();
    assert_eq!(fit["country"], "testland");
    assert!(fit["per_day"]["beta"].is_number());
    let pinned: Vec<&str> = fit["result"]["pinned"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(pinned, ["I0", "R0"]);
    let plot = fs::read_to_string(f.join("plot_data.csv")).unwrap();
    assert!(plot.contains(",holdout"), "post-lockdown rows are emitted");
}
