//! Subcommand drivers. Each reads its resolved config, writes data files and
//! `report.toml` into the run directory, and returns the report text.

use std::path::{Path, PathBuf};

use hystkit::compensator::{euler_gain_limit, is_euler_stable};
use hystkit::feedback::{open_loop, stability_margins, MarginReport};
use hystkit::hysteresis::{KpModelParams, KpOperatorParams};
use hystkit::ident::{
    estimate_frf, fit_kp_shapes, fit_kp_weights, read_frf_csv, synthetic_frf_dataset, synthetic_target_loop,
    write_frf_csv,
};
use hystkit::lti::{bode, freq_response, logspace, lowpass_filter, plant_identified};
use hystkit::simulate::{fluctuation_band, kappa_for_stroke, make_reference, rms_tracking_error, STROKE_M};
use hystkit::timeseries::format_sig12;
use hystkit::{
    run_compensation, run_scenario, CompensationOptions, Error, FrfPoint, FrfRecord, KpModel, KpOperator, LoopMode,
    Result, TimeSeries,
};
use toml::{Table, Value};

use crate::config::{
    resolve_path, ClosedLoopConfig, CompensateConfig, FitConfig, FrfConfig, FrfSource, HysteresisConfig, LoopGains,
    MarginsConfig,
};
use crate::output::{gnuplot_script, Panel, RunDir, PLOT_SCRIPT};

pub const REPORT: &str = "report.toml";

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Context {
    /// Directory that relative config paths resolve against.
    pub base: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub plot: bool,
}

fn table<const N: usize>(entries: [(&str, Value); N]) -> Table {
    entries.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

fn finish(run: &mut RunDir, report: &Table) -> Result<String> {
    let text = toml::to_string(report).map_err(|e| Error::Config(format!("report: {e}")))?;
    run.write_text(REPORT, &text)?;
    Ok(text)
}

fn extrema(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

// ---------------------------------------------------------------------------

pub fn hysteresis(mut cfg: HysteresisConfig, ctx: &Context) -> Result<String> {
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let mut model = cfg.model(&ctx.base)?;
    let input = make_reference(&cfg.input, cfg.duration_s, cfg.sample_rate_hz, cfg.seed)?;
    let u = input.require("reference")?.to_vec();
    let y = u.iter().map(|&v| model.apply(v)).collect::<Result<Vec<_>>>()?;
    let (y_min, y_max) = extrema(&y);
    let bound = model.bound();
    let mut report = table([
        ("samples", Value::Integer(u.len() as i64)),
        ("bound", Value::Float(bound)),
        ("y_min", Value::Float(y_min)),
        ("y_max", Value::Float(y_max)),
        ("within_bound", Value::Boolean(y_max <= bound && y_min >= -bound)),
    ]);

    let mut ts = TimeSeries::new(1.0 / cfg.sample_rate_hz)?.with("u", u)?;
    if cfg.stroke {
        let g0 = plant_identified().dc_gain();
        let kappa = cfg
            .kappa_tilde
            .unwrap_or_else(|| kappa_for_stroke(&model, g0, STROKE_M));
        let stroke: Vec<f64> = y.iter().map(|v| kappa * g0 * (v + bound)).collect();
        let (_, s_max) = extrema(&stroke);
        report.insert("kappa_tilde".into(), Value::Float(kappa));
        report.insert("stroke_max_m".into(), Value::Float(s_max));
        ts.insert("y", y)?;
        ts.insert("stroke_m", stroke)?;
    } else {
        ts.insert("y", y)?;
    }

    let mut run = RunDir::create(&ctx.out)?;
    run.write_series("hysteresis.csv", &ts)?;
    if ctx.plot {
        let panel = Panel {
            csv: "hysteresis.csv".into(),
            x: "u",
            ys: vec!["y"],
            xlabel: "input",
            ylabel: "output",
            logx: false,
        };
        run.write_text(PLOT_SCRIPT, &gnuplot_script("hysteresis", &[panel]))?;
    }
    let text = finish(&mut run, &report)?;
    run.write_manifest("hysteresis", Some(cfg.seed), &cfg)?;
    Ok(text)
}

// ---------------------------------------------------------------------------

pub fn compensate(mut cfg: CompensateConfig, ctx: &Context) -> Result<String> {
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let model = cfg.model(&ctx.base)?;
    let h = 1.0 / cfg.sample_rate_hz;
    let gamma_tot = model.max_gain();
    let reference = make_reference(&cfg.reference, cfg.duration_s, cfg.sample_rate_hz, cfg.seed)?;
    let options = CompensationOptions {
        gain: cfg.gain,
        y0: cfg.y0,
        u0: cfg.u0,
        u_limits: cfg.u_limits.map(|[lo, hi]| (lo, hi)),
        stall_window_s: cfg.stall_window_s,
    };
    let ts = run_compensation(model, &reference, &options)?;
    let y_star = ts.require("y_star")?;
    let y_hat = ts.require("y_hat")?;
    let err: Vec<f64> = y_star.iter().zip(y_hat).map(|(a, b)| a - b).collect();
    let rms = (err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64).sqrt();
    let max_abs = err.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let mut report = table([
        ("samples", Value::Integer(err.len() as i64)),
        ("rms_error", Value::Float(rms)),
        ("max_abs_error", Value::Float(max_abs)),
        ("final_error", Value::Float(err.last().copied().unwrap_or(0.0))),
        ("euler_gain_limit", Value::Float(euler_gain_limit(h, gamma_tot))),
        ("euler_stable", Value::Boolean(is_euler_stable(h, cfg.gain, gamma_tot))),
        (
            "unreachable",
            Value::Boolean(ts.metadata.get("unreachable").is_some_and(|v| v == "true")),
        ),
    ]);
    if let Some(t) = ts.metadata.get("unreachable_at_s").and_then(|v| v.parse().ok()) {
        report.insert("unreachable_at_s".into(), Value::Float(t));
    }

    let mut run = RunDir::create(&ctx.out)?;
    run.write_series("compensate.csv", &ts)?;
    if ctx.plot {
        let panels = [
            Panel {
                csv: "compensate.csv".into(),
                x: "time_s",
                ys: vec!["y_star", "y_hat"],
                xlabel: "time (s)",
                ylabel: "model output",
                logx: false,
            },
            Panel {
                csv: "compensate.csv".into(),
                x: "time_s",
                ys: vec!["u"],
                xlabel: "time (s)",
                ylabel: "input",
                logx: false,
            },
        ];
        run.write_text(PLOT_SCRIPT, &gnuplot_script("compensate", &panels))?;
    }
    let text = finish(&mut run, &report)?;
    run.write_manifest("compensate", Some(cfg.seed), &cfg)?;
    Ok(text)
}

// ---------------------------------------------------------------------------

/// One row of the closed-loop summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSummary {
    pub mode: LoopMode,
    pub rms_error_m: f64,
    pub max_abs_error_m: f64,
    pub tail_band_m: f64,
    pub clamped_samples: usize,
}

fn summarize(mode: LoopMode, ts: &TimeSeries, skip_s: f64) -> Result<LoopSummary> {
    let r = ts.require("reference")?;
    let y = ts.require("plant_output")?;
    let first = ((skip_s / ts.period()).round() as usize).min(r.len());
    let max_abs = r[first..]
        .iter()
        .zip(&y[first..])
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(LoopSummary {
        mode,
        rms_error_m: rms_tracking_error(ts, skip_s)?,
        max_abs_error_m: max_abs,
        tail_band_m: fluctuation_band(ts, 0.5)?,
        clamped_samples: ts
            .metadata
            .get("clamped_samples")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0),
    })
}

pub const SUMMARY_HEADER: &str = "mode,rms_error_m,max_abs_error_m,tail_band_m,clamped_samples";

pub fn closedloop(mut cfg: ClosedLoopConfig, ctx: &Context) -> Result<String> {
    if let Some(s) = ctx.seed {
        cfg.scenario.seed = s;
    }
    cfg.validate()?;
    let mut run = RunDir::create(&ctx.out)?;
    let csv_name = |m: LoopMode| format!("{}/scenario.csv", m.name());

    // one thread and one output directory per mode
    let results: Vec<Result<LoopSummary>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .modes
            .iter()
            .map(|&mode| {
                let mut sc = cfg.scenario.clone();
                sc.mode = mode;
                let dir = ctx.out.join(mode.name());
                let skip = cfg.skip_s;
                s.spawn(move || -> Result<LoopSummary> {
                    let ts = run_scenario(&sc)?;
                    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
                        path: dir.clone(),
                        source,
                    })?;
                    ts.save(&dir.join("scenario.csv"))?;
                    summarize(mode, &ts, skip)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    for r in &rows {
        run.record(&csv_name(r.mode));
    }

    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode.name(),
            format_sig12(r.rms_error_m),
            format_sig12(r.max_abs_error_m),
            format_sig12(r.tail_band_m),
            r.clamped_samples
        ));
    }
    run.write_text("summary.csv", &csv)?;

    if ctx.plot {
        let panels: Vec<Panel> = rows
            .iter()
            .map(|r| Panel {
                csv: csv_name(r.mode),
                x: "time_s",
                ys: vec!["reference", "plant_output"],
                xlabel: "time (s)",
                ylabel: r.mode.name(),
                logx: false,
            })
            .collect();
        run.write_text(PLOT_SCRIPT, &gnuplot_script("closedloop", &panels))?;
    }

    let mut report = Table::new();
    for r in &rows {
        report.insert(
            r.mode.name().into(),
            Value::Table(table([
                ("rms_error_m", Value::Float(r.rms_error_m)),
                ("max_abs_error_m", Value::Float(r.max_abs_error_m)),
                ("tail_band_m", Value::Float(r.tail_band_m)),
                ("clamped_samples", Value::Integer(r.clamped_samples as i64)),
            ])),
        );
    }
    finish(&mut run, &report)?;
    run.write_manifest("closedloop", Some(cfg.scenario.seed), &cfg)?;

    let mut text = format!(
        "{:<18} {:>14} {:>14} {:>14} {:>8}\n",
        "mode", "rms_um", "max_abs_um", "tail_band_um", "clamped"
    );
    for r in &rows {
        text.push_str(&format!(
            "{:<18} {:>14.3} {:>14.3} {:>14.3} {:>8}\n",
            r.mode.name(),
            r.rms_error_m * 1e6,
            r.max_abs_error_m * 1e6,
            r.tail_band_m * 1e6,
            r.clamped_samples
        ));
    }
    Ok(text)
}

// ---------------------------------------------------------------------------

fn margin_table(m: &MarginReport, gains: &LoopGains) -> Table {
    let mut t = table([
        ("kp", Value::Float(gains.kp)),
        ("ki", Value::Float(gains.ki)),
        ("filter_cutoff_hz", Value::Float(gains.filter_cutoff_hz)),
        ("phase_margin_deg", Value::Float(m.phase_margin_deg)),
        ("gain_crossover_rad_s", Value::Float(m.gain_crossover_rad_s)),
    ]);
    // TOML has no infinity literal in every reader; an absent key means unbounded
    if m.gain_margin_db.is_finite() {
        t.insert("gain_margin_db".into(), Value::Float(m.gain_margin_db));
    }
    if let Some(w) = m.phase_crossover_rad_s {
        t.insert("phase_crossover_rad_s".into(), Value::Float(w));
    }
    t
}

fn frf_points(source: &FrfSource, seed: Option<u64>, base: &Path) -> Result<(Vec<FrfPoint>, Option<u64>)> {
    match source {
        FrfSource::Synthetic {
            plant,
            frequencies,
            amplitude,
            periods,
            sample_rate_hz,
            noise_std,
            seed: own,
        } => {
            if frequencies.count == 0 || !(frequencies.lo_hz > 0.0 && frequencies.hi_hz >= frequencies.lo_hz) {
                return Err(Error::Config(
                    "frequencies need 0 < lo_hz <= hi_hz and count >= 1".into(),
                ));
            }
            let seed = seed.unwrap_or(*own);
            let tf = plant.build()?;
            let freqs = logspace(frequencies.lo_hz, frequencies.hi_hz, frequencies.count);
            let records = synthetic_frf_dataset(&tf, &freqs, *amplitude, *periods, *sample_rate_hz, *noise_std, seed)?;
            Ok((estimate_frf(&records)?, Some(seed)))
        }
        FrfSource::Records {
            input_channel,
            output_channel,
            record,
        } => {
            let mut records = Vec::with_capacity(record.len());
            for r in record {
                let ts = TimeSeries::load(&resolve_path(base, &r.path))?;
                let pick = |name: &str| -> Result<TimeSeries> {
                    let data = ts
                        .channel(name)
                        .ok_or_else(|| Error::Config(format!("{}: no channel `{name}`", r.path.display())))?;
                    TimeSeries::new(ts.period())?
                        .with_start(ts.start())
                        .with(name, data.to_vec())
                };
                records.push(FrfRecord {
                    frequency_hz: r.frequency_hz,
                    input: pick(input_channel)?,
                    output: pick(output_channel)?,
                });
            }
            Ok((estimate_frf(&records)?, None))
        }
        FrfSource::Points { path } => {
            let p = resolve_path(base, path);
            let file = std::fs::File::open(&p).map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })?;
            Ok((read_frf_csv(std::io::BufReader::new(file))?, None))
        }
    }
}

fn frf_csv(points: &[FrfPoint]) -> Result<String> {
    let mut buf = Vec::new();
    write_frf_csv(points, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn frf(cfg: FrfConfig, ctx: &Context) -> Result<String> {
    let (points, seed) = frf_points(&cfg.source, ctx.seed, &ctx.base)?;
    let fit = hystkit::ident::fit_sos_delay(&points)?;
    let fitted_tf = fit.transfer_function()?;
    let omegas: Vec<f64> = points.iter().map(FrfPoint::omega).collect();
    let fitted: Vec<FrfPoint> = points
        .iter()
        .zip(freq_response(&fitted_tf, &omegas))
        .map(|(p, g)| FrfPoint {
            frequency_hz: p.frequency_hz,
            response: g,
        })
        .collect();

    let mut report = Table::new();
    report.insert(
        "fit".into(),
        Value::Table(table([
            ("gain", Value::Float(fit.gain)),
            ("omega_n_rad_s", Value::Float(fit.omega_n)),
            ("zeta", Value::Float(fit.zeta)),
            ("delay_s", Value::Float(fit.delay)),
            (
                "den",
                Value::Array(fitted_tf.den().iter().map(|&c| Value::Float(c)).collect()),
            ),
            ("residual", Value::Float(fit.residual)),
            ("iterations", Value::Integer(fit.iterations as i64)),
            ("points", Value::Integer(points.len() as i64)),
        ])),
    );
    if let Some(gains) = &cfg.margins {
        let l = open_loop(gains.kp, gains.ki, &fitted_tf, &lowpass_filter(gains.filter_cutoff_hz)?)?;
        let m = stability_margins(&l)?;
        report.insert("margins".into(), Value::Table(margin_table(&m, gains)));
    }

    let mut run = RunDir::create(&ctx.out)?;
    run.write_text("frf.csv", &frf_csv(&points)?)?;
    run.write_text("frf_fit.csv", &frf_csv(&fitted)?)?;
    if ctx.plot {
        let panel = |ys: &'static str, label: &'static str| Panel {
            csv: "frf.csv".into(),
            x: "frequency_hz",
            ys: vec![ys],
            xlabel: "frequency (Hz)",
            ylabel: label,
            logx: true,
        };
        let mut script = gnuplot_script("frf", &[panel("magnitude", "|G|"), panel("phase_deg", "phase (deg)")]);
        script = script.replace(
            "with lines title 'magnitude'",
            "with points title 'measured', 'frf_fit.csv' using (column('frequency_hz')):(column('magnitude')) with lines title 'fit'",
        );
        script = script.replace(
            "with lines title 'phase_deg'",
            "with points title 'measured', 'frf_fit.csv' using (column('frequency_hz')):(column('phase_deg')) with lines title 'fit'",
        );
        run.write_text(PLOT_SCRIPT, &script)?;
    }
    let text = finish(&mut run, &report)?;
    run.write_manifest("frf", seed, &cfg)?;
    Ok(text)
}

// ---------------------------------------------------------------------------

pub fn fit(cfg: FitConfig, ctx: &Context) -> Result<String> {
    cfg.validate()?;
    let data = match cfg.data_path(&ctx.base) {
        Some(p) => TimeSeries::load(&p)?,
        None => synthetic_target_loop()?,
    };
    let u = data
        .require(&cfg.input_channel)
        .map_err(|e| Error::Config(e.to_string()))?;
    let y = data
        .require(&cfg.output_channel)
        .map_err(|e| Error::Config(e.to_string()))?;
    let h = data.period();

    let mut report = Table::new();
    let params = if let Some(grid) = &cfg.weights {
        let ops = grid
            .operator
            .iter()
            .map(|o| KpOperator::new(o.delta, o.w, o.m, o.gamma))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(format!("weights grid: {e}")))?;
        let wf = fit_kp_weights(u, y, &ops)?;
        report.insert("method".into(), Value::String("weights".into()));
        report.insert("rms".into(), Value::Float(wf.rms));
        report.insert(
            "weights".into(),
            Value::Array(wf.weights.iter().map(|&w| Value::Float(w)).collect()),
        );
        let operator: Vec<KpOperatorParams> = grid
            .operator
            .iter()
            .zip(&wf.weights)
            .filter(|(_, &rho)| rho > 0.0)
            .map(|(o, &rho)| KpOperatorParams {
                delta: o.delta,
                w: o.w,
                m: o.m,
                gamma: o.gamma,
                rho,
                y0: 0.0,
            })
            .collect();
        KpModelParams {
            n: operator.len(),
            operator,
        }
    } else {
        let search = cfg.shapes.clone().unwrap_or_default();
        let sf = fit_kp_shapes(u, y, h, cfg.warmup_s, &search)?;
        report.insert("method".into(), Value::String("shapes".into()));
        report.insert("rms".into(), Value::Float(sf.rms));
        report.insert("sweeps".into(), Value::Integer(sf.sweeps as i64));
        sf.params
    };
    report.insert("active_operators".into(), Value::Integer(params.n as i64));

    let mut run = RunDir::create(&ctx.out)?;
    let mut ts = TimeSeries::new(h)?
        .with_start(data.start())
        .with("input", u.to_vec())?
        .with("measured", y.to_vec())?;
    if params.n > 0 {
        let mut model = KpModel::from_params(&params)?;
        let modeled = u.iter().map(|&v| model.apply(v)).collect::<Result<Vec<_>>>()?;
        ts.insert("model", modeled)?;
        run.write_text("kp_fit.toml", &params.to_toml())?;
    }
    run.write_series("fit.csv", &ts)?;
    if ctx.plot {
        let ys = if params.n > 0 {
            vec!["measured", "model"]
        } else {
            vec!["measured"]
        };
        let panel = Panel {
            csv: "fit.csv".into(),
            x: "input",
            ys,
            xlabel: "input",
            ylabel: "output",
            logx: false,
        };
        run.write_text(PLOT_SCRIPT, &gnuplot_script("fit", &[panel]))?;
    }
    let text = finish(&mut run, &report)?;
    run.write_manifest("fit", None, &cfg)?;
    Ok(text)
}

// ---------------------------------------------------------------------------

pub fn margins(cfg: MarginsConfig, ctx: &Context) -> Result<String> {
    let plant = cfg.plant.build()?;
    let g = &cfg.gains;
    let l = open_loop(g.kp, g.ki, &plant, &lowpass_filter(g.filter_cutoff_hz)?)?;
    let m = stability_margins(&l)?;
    let b = &cfg.bode;
    if b.points < 2 || !(b.lo_rad_s > 0.0 && b.hi_rad_s > b.lo_rad_s) {
        return Err(Error::Config(
            "bode grid needs 0 < lo_rad_s < hi_rad_s and points >= 2".into(),
        ));
    }
    let mut csv = String::from("omega_rad_s,magnitude_db,phase_deg\n");
    for p in bode(&l, &logspace(b.lo_rad_s, b.hi_rad_s, b.points)) {
        csv.push_str(&format!(
            "{},{},{}\n",
            format_sig12(p.omega),
            format_sig12(20.0 * p.magnitude.log10()),
            format_sig12(p.phase_deg)
        ));
    }

    let mut run = RunDir::create(&ctx.out)?;
    run.write_text("bode.csv", &csv)?;
    if ctx.plot {
        let panel = |y: &'static str, label: &'static str| Panel {
            csv: "bode.csv".into(),
            x: "omega_rad_s",
            ys: vec![y],
            xlabel: "omega (rad/s)",
            ylabel: label,
            logx: true,
        };
        run.write_text(
            PLOT_SCRIPT,
            &gnuplot_script("bode", &[panel("magnitude_db", "dB"), panel("phase_deg", "deg")]),
        )?;
    }
    let mut report = Table::new();
    report.insert("margins".into(), Value::Table(margin_table(&m, g)));
    let text = finish(&mut run, &report)?;
    run.write_manifest("margins", None, &cfg)?;
    Ok(text)
}
