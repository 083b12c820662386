use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hystkit::hysteresis::KpModelParams;
use hystkit::ident::read_frf_csv;
use hystkit::TimeSeries;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hystkit"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn report(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("report.toml"))
        .unwrap()
        .parse()
        .unwrap()
}

fn manifest(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("manifest.toml"))
        .unwrap()
        .parse()
        .unwrap()
}

fn f(t: &toml::Table, path: &[&str]) -> f64 {
    let mut v = &t[path[0]];
    for k in &path[1..] {
        v = &v[*k];
    }
    v.as_float().unwrap_or_else(|| panic!("{path:?} is not a float: {v}"))
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn margins_on_default_gains_exceed_60_deg() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    run_ok(&[
        "margins",
        "--config",
        &cfg("margins.toml"),
        "--out",
        out.to_str().unwrap(),
    ]);
    let r = report(&out);
    assert!(f(&r, &["margins", "phase_margin_deg"]) > 60.0);
    let bode = std::fs::read_to_string(out.join("bode.csv")).unwrap();
    assert!(bode.starts_with("omega_rad_s,magnitude_db,phase_deg\n"));
    assert_eq!(bode.lines().count(), 401);
}

#[test]
fn hysteresis_fixture_loop_is_bounded_and_spans_the_stroke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_ok(&[
        "hysteresis",
        "--config",
        &cfg("hysteresis_fixture.toml"),
        "--out",
        out.to_str().unwrap(),
    ]);
    let ts = TimeSeries::load(&out.join("hysteresis.csv")).unwrap();
    let bound: f64 = KpModelParams::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/kp_n3.toml"))
        .unwrap()
        .operator
        .iter()
        .map(|o| o.rho * o.gamma * o.m)
        .sum();
    for &y in ts.require("y").unwrap() {
        assert!(y.abs() <= bound * (1.0 + 1e-11), "{y} outside +-{bound}");
    }
    let stroke_max = ts.require("stroke_m").unwrap().iter().fold(0.0f64, |m, &v| m.max(v));
    assert!((stroke_max - 500e-6).abs() < 0.01 * 500e-6, "stroke max {stroke_max}");
    assert_eq!(ts.require("u").unwrap().len(), 40_000);
}

#[test]
fn zero_width_operator_gives_a_straight_saturated_line() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "hysteresis",
        "--config",
        &cfg("hysteresis_single_play.toml"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let ts = TimeSeries::load(&dir.path().join("hysteresis.csv")).unwrap();
    let u = ts.require("u").unwrap();
    let y = ts.require("y").unwrap();
    for (&u, &y) in u.iter().zip(y) {
        assert!((y - (u - 2.5).clamp(-1.0, 1.0)).abs() < 1e-11, "u {u} y {y}");
    }
}

#[test]
fn compensate_staircase_converges_and_unreachable_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    run_ok(&[
        "compensate",
        "--config",
        &cfg("compensate_staircase.toml"),
        "--out",
        a.to_str().unwrap(),
    ]);
    let r = report(&a);
    assert_eq!(r["unreachable"].as_bool(), Some(false));
    assert!(f(&r, &["final_error"]).abs() < 1e-9);
    assert_eq!(r["euler_stable"].as_bool(), Some(true));
    let ts = TimeSeries::load(&a.join("compensate.csv")).unwrap();
    for name in ["u", "y_hat", "y_star"] {
        assert_eq!(ts.require(name).unwrap().len(), 28_000);
    }

    let text = "duration_s = 6.0\nu_limits = [0.0, 5.0]\n[reference]\nkind = \"step\"\nheight = 0.9\n";
    let c = write(dir.path(), "unreachable.toml", text);
    let b = dir.path().join("b");
    run_ok(&["compensate", "--config", &c, "--out", b.to_str().unwrap()]);
    let r = report(&b);
    assert_eq!(r["unreachable"].as_bool(), Some(true));
    assert!(f(&r, &["unreachable_at_s"]) > 0.0);
}

const SHORT_LOOP: &str = r#"
skip_s = 0.2
[scenario]
duration_s = 1.0
[scenario.reference]
kind = "sine"
amplitude = 150e-6
frequency_hz = 1.0
offset = 250e-6
[scenario.controller]
filter_reference = true
"#;

#[test]
fn closedloop_writes_one_csv_per_mode_and_a_consistent_summary() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "loop.toml", SHORT_LOOP);
    let out = dir.path().join("run");
    let stdout = run_ok(&[
        "closedloop",
        "--config",
        &c,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(stdout.contains("two-dof"));

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("mode,rms_error_m,max_abs_error_m,tail_band_m,clamped_samples")
    );
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let ts = TimeSeries::load(&out.join(&row[0]).join("scenario.csv")).unwrap();
        let r = ts.require("reference").unwrap();
        let y = ts.require("plant_output").unwrap();
        let first = (0.2 / ts.period()).round() as usize;
        let n = (r.len() - first) as f64;
        let rms = (r[first..]
            .iter()
            .zip(&y[first..])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let reported: f64 = row[1].parse().unwrap();
        assert!(
            (rms - reported).abs() <= 1e-9 * reported,
            "{}: {rms} vs {reported}",
            row[0]
        );
    }
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["feedback-only", "feedforward-only", "two-dof"]);
    assert_eq!(manifest(&out)["seed"].as_integer(), Some(5));
}

#[test]
fn closedloop_is_deterministic_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "loop.toml", SHORT_LOOP);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&[
        "closedloop",
        "--config",
        &c,
        "--out",
        a.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    run_ok(&[
        "closedloop",
        "--config",
        &c,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    for rel in ["summary.csv", "two-dof/scenario.csv", "feedback-only/scenario.csv"] {
        assert_eq!(
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{rel}"
        );
    }
    let c2 = dir.path().join("c");
    run_ok(&[
        "closedloop",
        "--config",
        &c,
        "--out",
        c2.to_str().unwrap(),
        "--seed",
        "10",
    ]);
    assert_ne!(
        std::fs::read(a.join("two-dof/scenario.csv")).unwrap(),
        std::fs::read(c2.join("two-dof/scenario.csv")).unwrap()
    );
}

fn assert_plant_recovered(r: &toml::Table, tol: f64) {
    let truth = [
        ("gain", 45.57),
        ("omega_n_rad_s", 5.439e5f64.sqrt()),
        ("zeta", 737.9 / (2.0 * 5.439e5f64.sqrt())),
        ("delay_s", 0.002),
    ];
    for (k, v) in truth {
        let got = f(r, &["fit", k]);
        assert!((got - v).abs() <= tol * v, "{k}: {got} vs {v}");
    }
}

#[test]
fn frf_on_bundled_synthetic_config_recovers_the_plant() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "frf",
        "--config",
        &cfg("frf_synthetic.toml"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let r = report(dir.path());
    assert_plant_recovered(&r, 2e-3);
    assert!(f(&r, &["margins", "phase_margin_deg"]) > 60.0);
    let file = std::fs::File::open(dir.path().join("frf.csv")).unwrap();
    assert_eq!(read_frf_csv(file).unwrap().len(), 30);
    assert_eq!(manifest(dir.path())["seed"].as_integer(), Some(3));
}

#[test]
fn frf_on_bundled_points_recovers_the_plant() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "frf",
        "--config",
        &cfg("frf_points.toml"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_plant_recovered(&report(dir.path()), 2e-3);
}

#[test]
fn frf_from_time_domain_records() {
    let dir = tempfile::tempdir().unwrap();
    let g = hystkit::lti::plant_identified();
    let mut text = String::from("[source]\nkind = \"records\"\n");
    for (i, freq) in hystkit::lti::logspace(2.0, 250.0, 8).into_iter().enumerate() {
        let rec = hystkit::ident::synthetic_frf_record(&g, freq, 1.0, 5.0, 2000.0, 0.0, 0).unwrap();
        let ts = TimeSeries::new(rec.input.period())
            .unwrap()
            .with("u", rec.input.require("u").unwrap().to_vec())
            .unwrap()
            .with("y", rec.output.require("y").unwrap().to_vec())
            .unwrap();
        let name = format!("r{i}.csv");
        ts.save(&dir.path().join(&name)).unwrap();
        text.push_str(&format!(
            "[[source.record]]\nfrequency_hz = {freq:?}\npath = \"{name}\"\n"
        ));
    }
    let c = write(dir.path(), "frf.toml", &text);
    let out = dir.path().join("out");
    run_ok(&["frf", "--config", &c, "--out", out.to_str().unwrap()]);
    let r = report(&out);
    assert_plant_recovered(&r, 1e-3);
    assert!(!r.contains_key("margins"));
}

#[test]
fn fit_weights_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "fit",
        "--config",
        &cfg("fit_weights.toml"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let params = KpModelParams::load(&dir.path().join("kp_fit.toml")).unwrap();
    let r = report(dir.path());
    assert_eq!(r["active_operators"].as_integer(), Some(params.n as i64));
    assert!(params.n >= 1);
    let ts = TimeSeries::load(&dir.path().join("fit.csv")).unwrap();
    let m = ts.require("measured").unwrap();
    let y = ts.require("model").unwrap();
    let rms = (m.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m.len() as f64).sqrt();
    assert!((rms - f(&r, &["rms"])).abs() < 1e-9, "{rms}");
}

#[test]
fn fit_shapes_from_a_recorded_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = hystkit::ident::synthetic_target_loop().unwrap();
    data.save(&dir.path().join("loop.csv")).unwrap();
    let text = r#"
data = "loop.csv"
warmup_s = 10.0
[shapes]
operators = 2
m = 0.72
gamma = 1.0
delta_range = [-3.5, -1.5]
delta_steps = 9
w_range = [0.5, 2.0]
w_steps = 7
max_sweeps = 2
decimate = 20
"#;
    let c = write(dir.path(), "fit.toml", text);
    let out = dir.path().join("out");
    run_ok(&["fit", "--config", &c, "--out", out.to_str().unwrap()]);
    let params = KpModelParams::load(&out.join("kp_fit.toml")).unwrap();
    assert_eq!(params.n, 2);
    assert!(f(&report(&out), &["rms"]) < 0.1);
}

#[test]
fn plot_flag_writes_a_script_over_existing_csvs() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["margins", "--out", dir.path().to_str().unwrap(), "--plot"]);
    let script = std::fs::read_to_string(dir.path().join("plot.gp")).unwrap();
    assert!(script.contains("'bode.csv'"));
    assert!(dir.path().join("bode.csv").exists());
    let outputs = manifest(dir.path())["outputs"].as_array().unwrap().clone();
    assert!(outputs.iter().any(|v| v.as_str() == Some("plot.gp")));
}

#[test]
fn print_config_is_a_fixed_point() {
    let mut names: Vec<PathBuf> = std::fs::read_dir(configs())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    names.sort();
    assert!(names.len() >= 8);
    let dir = tempfile::tempdir().unwrap();
    for p in names {
        let stem = p.file_stem().unwrap().to_str().unwrap();
        let cmd = stem.split('_').next().unwrap();
        let once = run_ok(&[cmd, "--config", p.to_str().unwrap(), "--print-config"]);
        let echoed = write(dir.path(), &format!("{stem}.toml"), &once);
        let twice = run_ok(&[cmd, "--config", &echoed, "--print-config"]);
        assert_eq!(once, twice, "{stem}");
    }
}

#[test]
fn manifest_echoes_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "hysteresis",
        "--config",
        &cfg("hysteresis_single_play.toml"),
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "4",
    ]);
    let m = manifest(dir.path());
    assert_eq!(m["command"].as_str(), Some("hysteresis"));
    assert_eq!(m["seed"].as_integer(), Some(4));
    assert_eq!(m["config"]["seed"].as_integer(), Some(4));
    assert_eq!(m["config"]["model"]["operator"][0]["w"].as_float(), Some(0.0));
    assert_eq!(m["hystkit_version"].as_str(), Some(hystkit::VERSION));
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "bad.toml", "gains = { kp = 1.0 }\nbogus_key = 1\n");
    let out = run(&[
        "margins",
        "--config",
        &c,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("bogus_key"), "{err}");

    let missing = dir.path().join("nope.toml");
    let out = run(&["margins", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let c = write(
        dir.path(),
        "neg.toml",
        "[scenario]\nduration_s = -1.0\n[scenario.reference]\nkind = \"step\"\nheight = 1e-4\n",
    );
    let out = run(&[
        "closedloop",
        "--config",
        &c,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duration_s"));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "tiny.toml", "[gains]\nkp = 1e-3\nki = 1e-3\n");
    let out = run(&[
        "margins",
        "--config",
        &c,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("crossover"));
}

#[test]
fn unwritable_output_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "occupied", "");
    let out = run(&["margins", "--out", &file]);
    assert_eq!(out.status.code(), Some(1));
}
