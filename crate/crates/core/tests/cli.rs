use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

fn nowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast")).args(args).output().expect("run binary")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_else(|| panic!("no stderr, stdout {:?}", out.stdout));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

/// Fixture config with a short sampler, written into `dir`.
fn config(dir: &Path, model: Value) -> PathBuf {
    let f = fixture();
    let value = json!({
        "model": model,
        "data": { "snapshots": f.join("snapshots"), "calendar": f.join("calendar.csv") },
        "max_delay": 21,
        "window_length": 56,
        "sampler": { "chains": 2, "warmup_iters": 150, "sampling_iters": 150 },
        "seed": 3,
        "nowcast": { "now": "2021-04-23" }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn icu_model(freeze: bool) -> Value {
    json!({
        "variant": "RL",
        "freeze_beta": freeze,
        "indicators": [{ "name": "icu", "file": fixture().join("icu.csv"), "lag": 14 }]
    })
}

fn run_ok(args: &[&str]) -> String {
    let out = nowcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or_else(|_| panic!("not a number: {s:?}"))
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"model": {"variant": "R"}, "max_dealy": 21}"#).unwrap();
    let out = nowcast(&["nowcast", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("max_dealy"));
}

#[test]
fn variant_r_with_indicators_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = icu_model(false);
    model["variant"] = json!("R");
    let path = config(dir.path(), model);
    for cmd in ["nowcast", "evaluate", "simulate"] {
        let out = nowcast(&[cmd, "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert_eq!(stderr_json(&out)["error"], "config");
    }
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), json!({"variant": "R"}));
    let dates = dir.path().join("dates.txt");
    fs::write(&dates, "2021-04-21\n").unwrap();
    let c = path.to_str().unwrap();
    let d = dates.to_str().unwrap();
    let out = nowcast(&["evaluate", "--config", c, "--dates", d, "--truth", "2021-06-30"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("truth"));
    // truth not after the reporting date
    let out = nowcast(&["evaluate", "--config", c, "--dates", d, "--truth", "2021-04-21"]);
    assert_eq!(out.status.code(), Some(3));
    let out = nowcast(&["nowcast", "--config", c, "--now", "2021-04-24"]);
    assert_eq!(out.status.code(), Some(3), "no snapshot on a Saturday");
    let out = nowcast(&["nowcast", "--config", c, "--now", "2021-02-02"]);
    assert_eq!(out.status.code(), Some(3), "too little history for the window");
}

#[test]
fn zero_workers_exits_2() {
    let out = nowcast(&["simulate", "--workers", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nowcast_outputs_are_valid_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), icu_model(false));
    let c = path.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["nowcast", "--config", c, "--out", a.to_str().unwrap(), "--workers", "1"]);
    run_ok(&["nowcast", "--config", c, "--out", b.to_str().unwrap(), "--workers", "3", "--draws"]);

    let names = [
        "nowcast.csv",
        "delay_summary.csv",
        "cumulative_reporting.csv",
        "beta.csv",
        "diagnostics.csv",
    ];
    for name in names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }

    let truth: std::collections::BTreeMap<String, u64> = csv_rows(&fixture().join("truth.csv"))
        .1
        .into_iter()
        .map(|r| (r[0].clone(), r[1].parse().unwrap()))
        .collect();
    let (header, rows) = csv_rows(&a.join("nowcast.csv"));
    assert_eq!(header, ["event_date", "observed", "q2.5", "q25", "q50", "q75", "q97.5", "mean"]);
    assert_eq!(rows.len(), 56);
    assert_eq!(rows.last().unwrap()[0], "2021-04-23");
    let mut covered = 0;
    for r in &rows {
        let q: Vec<f64> = r[1..7].iter().map(|v| num(v)).collect();
        assert!(q.windows(2).all(|w| w[0] <= w[1]), "observed <= quantiles ascending: {r:?}");
        let t = truth[&r[0]] as f64;
        covered += usize::from(q[1] <= t && t <= q[5]);
    }
    assert!(covered >= 50, "95% intervals cover {covered} of 56 days");

    let (header, rows) = csv_rows(&a.join("delay_summary.csv"));
    assert_eq!(header[..4], ["event_date", "q05", "q50", "q95"]);
    for r in &rows {
        assert!(num(&r[1]) <= num(&r[2]) && num(&r[2]) <= num(&r[3]));
        assert!(num(&r[3]) <= 21.0);
    }

    let (header, rows) = csv_rows(&a.join("cumulative_reporting.csv"));
    assert_eq!(header.len(), 23);
    for r in &rows {
        let p: Vec<f64> = r[1..].iter().map(|v| num(v)).collect();
        assert!(p.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        assert!((p[21] - 1.0).abs() < 1e-6);
    }

    let (header, rows) = csv_rows(&a.join("beta.csv"));
    assert_eq!(header, ["coefficient", "mean", "q2.5", "q50", "q97.5"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "icu");

    let json: Value = serde_json::from_slice(&fs::read(b.join("nowcast.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 56);
    assert_eq!(rows[0]["draws"].as_array().unwrap().len(), 300);
}

#[test]
fn evaluate_aggregates_match_records_and_frozen_rl_equals_r() {
    let dir = tempfile::tempdir().unwrap();
    let dates = dir.path().join("dates.txt");
    fs::write(&dates, "2021-04-14\n2021-04-20\n2021-04-23\n").unwrap();
    let d = dates.to_str().unwrap();

    let r_dir = dir.path().join("r");
    fs::create_dir(&r_dir).unwrap();
    let r = config(&r_dir, json!({"variant": "R"}));
    let r_out = r_dir.join("out");
    run_ok(&["evaluate", "--config", r.to_str().unwrap(), "--dates", d, "--out", r_out.to_str().unwrap()]);

    let rl_dir = dir.path().join("rl");
    fs::create_dir(&rl_dir).unwrap();
    let rl = config(&rl_dir, icu_model(true));
    let rl_out = rl_dir.join("out");
    run_ok(&["evaluate", "--config", rl.to_str().unwrap(), "--dates", d, "--out", rl_out.to_str().unwrap()]);

    for name in ["scores.csv", "aggregate.json", "horizon.csv", "per_date.csv"] {
        assert_eq!(fs::read(r_out.join(name)).unwrap(), fs::read(rl_out.join(name)).unwrap(), "{name}");
    }
    assert!(!r_out.join("beta_trajectory.csv").exists());
    assert!(rl_out.join("beta_trajectory.csv").exists());

    let agg: Value = serde_json::from_slice(&fs::read(r_out.join("aggregate.json")).unwrap()).unwrap();
    let (header, rows) = csv_rows(&r_out.join("scores.csv"));
    assert_eq!(header, ["reporting_date", "offset", "crps", "logs", "se", "in75", "in90", "in95"]);
    assert_eq!(rows.len(), 21);
    let mut per_date: Vec<(f64, f64, f64)> = Vec::new();
    for chunk in rows.chunks(7) {
        let mean = |col: usize| chunk.iter().map(|r| num(&r[col])).sum::<f64>() / 7.0;
        per_date.push((mean(2), mean(3), mean(4)));
    }
    let crps = per_date.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let logs = per_date.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let rmse = (per_date.iter().map(|p| p.2).sum::<f64>() / 3.0).sqrt();
    let cov95 = rows.iter().filter(|r| r[7] == "1").count() as f64 / 21.0;
    assert_eq!(agg["n_dates"], 3);
    assert!((agg["crps"].as_f64().unwrap() - crps).abs() < 1e-5);
    assert!((agg["logs"].as_f64().unwrap() - logs).abs() < 1e-5);
    assert!((agg["rmse"].as_f64().unwrap() - rmse).abs() < 1e-5);
    assert!((agg["coverage_95"].as_f64().unwrap() - cov95).abs() < 1e-6);

    let (header, rows) = csv_rows(&r_out.join("per_date.csv"));
    assert_eq!(header[..5], ["reporting_date", "truth", "median", "q2.5", "q97.5"]);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["2021-04-14", "2021-04-20", "2021-04-23"]);
    for (r, p) in rows.iter().zip(&per_date) {
        assert!((num(&r[5]) - p.0).abs() < 1e-5);
    }
}

fn write_series(path: &Path, values: &[(chrono::NaiveDate, f64)]) {
    let mut text = String::from("date,value\n");
    for (d, v) in values {
        text.push_str(&format!("{d},{v}\n"));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn select_lag_recovers_a_shifted_copy() {
    use rand::{Rng, SeedableRng};
    let dir = tempfile::tempdir().unwrap();
    let start = chrono::NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let mut level = 3.0f64;
    let base: Vec<f64> = (0..200)
        .map(|_| {
            level += rng.random_range(-0.15..0.15);
            level.exp()
        })
        .collect();
    let day = |i: usize| start + chrono::Days::new(i as u64);
    let shift = 11;
    let target: Vec<_> = (shift..200).map(|i| (day(i), base[i - shift])).collect();
    let indicator: Vec<_> = (0..200).map(|i| (day(i), base[i])).collect();
    let t = dir.path().join("target.csv");
    let x = dir.path().join("indicator.csv");
    write_series(&t, &target);
    write_series(&x, &indicator);
    let common = ["select-lag", "--target", t.to_str().unwrap(), "--indicator", x.to_str().unwrap()];
    for form in ["L", "RL"] {
        let mut args = common.to_vec();
        args.extend(["--grid", "0:28", "--window", "2021-03-01:2021-06-01", "--form", form]);
        let stdout = run_ok(&args);
        assert!(stdout.starts_with(&format!("selected lag: {shift}\n")), "{form}: {stdout}");
        assert_eq!(stdout.lines().nth(1), Some("lag,rss,slope,intercept,n"));
        assert_eq!(stdout.lines().count(), 2 + 29);
    }

    let out_dir = dir.path().join("out");
    let mut args = common.to_vec();
    args.extend(["--window", "2021-03-01:2021-06-01", "--out", out_dir.to_str().unwrap()]);
    run_ok(&args);
    assert!(out_dir.join("lag_table.csv").exists());

    let mut args = common.to_vec();
    args.extend(["--grid", "5:2", "--window", "2021-03-01:2021-06-01"]);
    let out = nowcast(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("empty"));
}

#[test]
fn simulate_then_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let stdout = run_ok(&["simulate", "--out", sim.to_str().unwrap(), "--seed", "9"]);
    assert!(stdout.contains("120 days"), "{stdout}");
    for name in ["config.json", "dates.txt", "calendar.csv", "truth.csv", "lambda.csv", "events.csv"] {
        assert!(sim.join(name).exists(), "{name}");
    }
    let dates = fs::read_to_string(sim.join("dates.txt")).unwrap();
    assert_eq!(dates.lines().count(), 1 + 20);

    let again = dir.path().join("again");
    run_ok(&["simulate", "--out", again.to_str().unwrap(), "--seed", "9"]);
    for name in ["dates.txt", "truth.csv", "lambda.csv", "events.csv"] {
        assert_eq!(fs::read(sim.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }

    // generated config with a shorter sampler and the last two dates
    let mut config: Value = serde_json::from_slice(&fs::read(sim.join("config.json")).unwrap()).unwrap();
    config["sampler"] = json!({ "chains": 2, "warmup_iters": 100, "sampling_iters": 100 });
    fs::write(sim.join("config.json"), serde_json::to_string(&config).unwrap()).unwrap();
    let last: Vec<&str> = dates.lines().skip(19).collect();
    fs::write(sim.join("dates.txt"), last.join("\n")).unwrap();
    let stdout = run_ok(&["evaluate", "--config", sim.join("config.json").to_str().unwrap()]);
    let agg: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(agg["n_dates"], 2);
    for name in ["scores.csv", "aggregate.json", "horizon.csv", "per_date.csv"] {
        assert!(sim.join("results").join(name).exists(), "{name}");
    }
}
