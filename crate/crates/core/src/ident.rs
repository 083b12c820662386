//! Identification: sine-correlation FRF estimation, second-order-plus-delay
//! fitting, and KP weight / shape fitting from quasi-static loop data.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hysteresis::{KpModelParams, KpOperator, KpOperatorParams};
use crate::lti::{discretize, lowpass_filter, unwrap_near, TransferFunction};
use crate::timeseries::TimeSeries;

// ---------------------------------------------------------------------------
// FRF estimation

/// One single-frequency excitation experiment. The first channel of `input`
/// and of `output` is used.
#[derive(Debug, Clone)]
pub struct FrfRecord {
    pub frequency_hz: f64,
    pub input: TimeSeries,
    pub output: TimeSeries,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrfPoint {
    pub frequency_hz: f64,
    pub response: Complex64,
}

impl FrfPoint {
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency_hz
    }
}

/// Least-squares fit of `a sin(wt) + b cos(wt) + c`; returns the phasor `b - j a`.
fn sine_phasor(x: &[f64], times: impl Iterator<Item = f64>, omega: f64) -> Complex64 {
    let mut gram = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for (&v, t) in x.iter().zip(times) {
        let phi = Vector3::new((omega * t).sin(), (omega * t).cos(), 1.0);
        gram += phi * phi.transpose();
        rhs += phi * v;
    }
    let c = gram.cholesky().map(|ch| ch.solve(&rhs)).unwrap_or_else(Vector3::zeros);
    Complex64::new(c[1], -c[0])
}

/// FRF point of one record from the largest whole number of trailing periods.
pub fn estimate_frf_point(record: &FrfRecord) -> Result<FrfPoint> {
    let f = record.frequency_hz;
    if !(f.is_finite() && f > 0.0) {
        return Err(Error::InvalidParameter(format!("excitation frequency {f} Hz")));
    }
    let first = |ts: &TimeSeries| -> Result<Vec<f64>> {
        let name = ts
            .names()
            .next()
            .ok_or_else(|| Error::InvalidParameter("FRF record has an empty series".into()))?;
        Ok(ts.require(name)?.to_vec())
    };
    let u = first(&record.input)?;
    let y = first(&record.output)?;
    let h = record.input.period();
    if u.len() != y.len() || (record.output.period() - h).abs() > 1e-12 * h {
        return Err(Error::InvalidParameter(
            "FRF input and output must share length and sample period".into(),
        ));
    }
    let n = u.len();
    let periods = n as f64 * h * f;
    let whole = (periods + 1e-9).floor();
    if whole < 3.0 {
        return Err(Error::RecordTooShort { frequency: f, periods });
    }
    let len = ((whole / (f * h)).round() as usize).min(n);
    let skip = n - len;
    let omega = 2.0 * PI * f;
    let t0 = record.input.start();
    let times = || (skip..n).map(move |k| t0 + k as f64 * h);
    let pu = sine_phasor(&u[skip..], times(), omega);
    let py = sine_phasor(&y[skip..], times(), omega);
    let scale = u[skip..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if pu.norm() <= 1e-12 * scale || pu.norm() == 0.0 {
        return Err(Error::ZeroInputPhasor(f));
    }
    Ok(FrfPoint {
        frequency_hz: f,
        response: py / pu,
    })
}

pub fn estimate_frf(records: &[FrfRecord]) -> Result<Vec<FrfPoint>> {
    records.iter().map(estimate_frf_point).collect()
}

/// Steady-state response of `tf` to `amplitude * sin(2 pi f t)` sampled over
/// `periods` periods, plus Gaussian output noise. Transients are not simulated.
pub fn synthetic_frf_record(
    tf: &TransferFunction,
    frequency_hz: f64,
    amplitude: f64,
    periods: f64,
    sample_rate_hz: f64,
    noise_std: f64,
    seed: u64,
) -> Result<FrfRecord> {
    let omega = 2.0 * PI * frequency_hz;
    let g = tf.eval(Complex64::new(0.0, omega));
    let n = (periods * sample_rate_hz / frequency_hz).round() as usize;
    let h = 1.0 / sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut u = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for k in 0..n {
        let wt = omega * k as f64 * h;
        u.push(amplitude * wt.sin());
        let e = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        y.push(amplitude * g.norm() * (wt + g.arg()).sin() + e);
    }
    Ok(FrfRecord {
        frequency_hz,
        input: TimeSeries::new(h)?.with("u", u)?,
        output: TimeSeries::new(h)?.with("y", y)?,
    })
}

/// Records at each of `frequencies_hz`; record `i` draws noise from `seed + i`.
pub fn synthetic_frf_dataset(
    tf: &TransferFunction,
    frequencies_hz: &[f64],
    amplitude: f64,
    periods: f64,
    sample_rate_hz: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<FrfRecord>> {
    frequencies_hz
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            synthetic_frf_record(
                tf,
                f,
                amplitude,
                periods,
                sample_rate_hz,
                noise_std,
                seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

pub fn write_frf_csv<W: std::io::Write>(points: &[FrfPoint], writer: W) -> Result<()> {
    use crate::timeseries::format_sig12;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frequency_hz", "re", "im", "magnitude", "phase_deg"])?;
    for p in points {
        w.write_record([
            format_sig12(p.frequency_hz),
            format_sig12(p.response.re),
            format_sig12(p.response.im),
            format_sig12(p.response.norm()),
            format_sig12(p.response.arg().to_degrees()),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_frf_csv<R: std::io::Read>(reader: R) -> Result<Vec<FrfPoint>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("FRF CSV lacks column `{name}`")))
    };
    let (cf, cr, ci) = (col("frequency_hz")?, col("re")?, col("im")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config("FRF CSV has a non-numeric field".into()))
        };
        out.push(FrfPoint {
            frequency_hz: num(cf)?,
            response: Complex64::new(num(cr)?, num(ci)?),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// second order plus delay

#[derive(Debug, Clone, PartialEq)]
pub struct SosFit {
    pub gain: f64,
    pub omega_n: f64,
    pub zeta: f64,
    pub delay: f64,
    /// RMS of the relative complex misfit `|G_fit - G| / |G|`.
    pub residual: f64,
    pub iterations: usize,
}

impl SosFit {
    /// `gain / (s^2 + 2 zeta omega_n s + omega_n^2) * exp(-delay s)`.
    pub fn transfer_function(&self) -> Result<TransferFunction> {
        TransferFunction::new(
            vec![self.gain],
            vec![1.0, 2.0 * self.zeta * self.omega_n, self.omega_n * self.omega_n],
            self.delay,
        )
    }
}

struct LmOutcome {
    theta: Vec<f64>,
    cost: f64,
    iterations: usize,
}

/// Levenberg-Marquardt on `0.5 |r(theta)|^2`; `model` returns residuals and Jacobian.
fn levenberg_marquardt<F>(theta0: Vec<f64>, max_iter: usize, model: F) -> Result<LmOutcome>
where
    F: Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    let mut theta = theta0;
    let (mut r, mut jac) = model(&theta);
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = 1e-3;
    for iter in 1..=max_iter {
        let jtj = jac.tr_mul(&jac);
        let grad = jac.tr_mul(&r);
        let mut step = None;
        while lambda < 1e20 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 4.0;
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
            let (r_t, j_t) = model(&trial);
            let cost_t = 0.5 * r_t.norm_squared();
            if cost_t.is_finite() && cost_t < cost {
                step = Some((trial, r_t, j_t, cost_t, delta.norm()));
                lambda = (lambda / 3.0).max(1e-12);
                break;
            }
            lambda *= 4.0;
        }
        let Some((trial, r_t, j_t, cost_t, dnorm)) = step else {
            // no descent direction left: stationary point
            return Ok(LmOutcome {
                theta,
                cost,
                iterations: iter,
            });
        };
        let tnorm = trial.iter().map(|t| t * t).sum::<f64>().sqrt();
        let reduction = cost - cost_t;
        theta = trial;
        r = r_t;
        jac = j_t;
        cost = cost_t;
        if dnorm <= 1e-12 * (tnorm + 1e-12) || reduction <= 1e-16 * cost || cost < 1e-30 {
            return Ok(LmOutcome {
                theta,
                cost,
                iterations: iter,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        cost,
        best: theta,
    })
}

const SOS_MAX_ITER: usize = 500;

/// `G(jw)` of the parametrization `theta = [ln b, ln wn, ln zeta, d]` and its
/// partial derivatives.
fn sos_eval(theta: &[f64], omega: f64, with_delay: bool) -> (Complex64, [Complex64; 4]) {
    let (b, wn, z) = (theta[0].exp(), theta[1].exp(), theta[2].exp());
    let d = if with_delay { theta[3] } else { 0.0 };
    let j = Complex64::i();
    let den = Complex64::new(wn * wn - omega * omega, 2.0 * z * wn * omega);
    let g = b * (-j * omega * d).exp() / den;
    let dg_dwn = -g / den * Complex64::new(2.0 * wn, 2.0 * z * omega);
    let dg_dz = -g / den * Complex64::new(0.0, 2.0 * wn * omega);
    (g, [g, dg_dwn * wn, dg_dz * z, -j * omega * g])
}

/// Weighted nonlinear least squares fit of `b / (s^2 + 2 zeta wn s + wn^2) e^{-ds}`.
///
/// Initialized by a magnitude-only grid over `(wn, zeta)` refined without delay,
/// then a phase-slope estimate of the delay, then a joint complex fit. Residuals
/// are relative to `|G|` so that scaling every point only moves the gain.
pub fn fit_sos_delay(points: &[FrfPoint]) -> Result<SosFit> {
    if points.len() < 6 {
        return Err(Error::InvalidParameter(format!(
            "second-order fit needs at least 6 FRF points, got {}",
            points.len()
        )));
    }
    let mut pts: Vec<FrfPoint> = points.to_vec();
    pts.sort_by(|a, b| a.frequency_hz.total_cmp(&b.frequency_hz));
    if pts.iter().any(|p| {
        !(p.frequency_hz.is_finite() && p.frequency_hz > 0.0) || !p.response.is_finite() || p.response.norm() == 0.0
    }) {
        return Err(Error::InvalidParameter(
            "FRF points need positive frequency and nonzero finite response".into(),
        ));
    }
    let omegas: Vec<f64> = pts.iter().map(FrfPoint::omega).collect();
    let mags: Vec<f64> = pts.iter().map(|p| p.response.norm()).collect();
    let (w_lo, w_hi) = (omegas[0], omegas[omegas.len() - 1]);

    // magnitude-only grid: b is closed form for fixed (wn, zeta)
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for wn in crate::lti::logspace(w_lo / 2.0, 2.0 * w_hi, 80) {
        for z in crate::lti::logspace(0.02, 3.0, 40) {
            let q: Vec<f64> = omegas
                .iter()
                .zip(&mags)
                .map(|(&w, &m)| 1.0 / (Complex64::new(wn * wn - w * w, 2.0 * z * wn * w).norm() * m))
                .collect();
            let b = q.iter().sum::<f64>() / q.iter().map(|v| v * v).sum::<f64>();
            let cost: f64 = q.iter().map(|v| (b * v - 1.0).powi(2)).sum();
            if cost < best.0 {
                best = (cost, b, wn, z);
            }
        }
    }
    let m = pts.len();
    let magnitude_stage = levenberg_marquardt(vec![best.1.ln(), best.2.ln(), best.3.ln()], SOS_MAX_ITER, |th| {
        let mut r = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, 3);
        for i in 0..m {
            let (g, dg) = sos_eval(th, omegas[i], false);
            r[i] = (g.norm() - mags[i]) / mags[i];
            for k in 0..3 {
                jac[(i, k)] = (g.conj() * dg[k]).re / (g.norm() * mags[i]);
            }
        }
        (r, jac)
    })?;
    let th = magnitude_stage.theta;

    // delay from the slope of the residual phase, unwrapped from low frequency
    let mut prev = 0.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let (g, _) = sos_eval(&[th[0], th[1], th[2], 0.0], omegas[i], false);
        let phi = unwrap_near((p.response / g).arg(), prev);
        prev = phi;
        num += omegas[i] * phi;
        den += omegas[i] * omegas[i];
    }
    let d0 = -num / den;

    let full = levenberg_marquardt(vec![th[0], th[1], th[2], d0], SOS_MAX_ITER, |th| {
        let mut r = DVector::zeros(2 * m);
        let mut jac = DMatrix::zeros(2 * m, 4);
        for i in 0..m {
            let (g, dg) = sos_eval(th, omegas[i], true);
            let e = (g - pts[i].response) / mags[i];
            r[2 * i] = e.re;
            r[2 * i + 1] = e.im;
            for k in 0..4 {
                jac[(2 * i, k)] = dg[k].re / mags[i];
                jac[(2 * i + 1, k)] = dg[k].im / mags[i];
            }
        }
        (r, jac)
    })
    .map_err(|e| match e {
        Error::NotConverged { iterations, cost, best } => Error::NotConverged {
            iterations,
            cost,
            best: vec![best[0].exp(), best[1].exp(), best[2].exp(), best[3]],
        },
        other => other,
    })?;
    let t = full.theta;
    Ok(SosFit {
        gain: t[0].exp(),
        omega_n: t[1].exp(),
        zeta: t[2].exp(),
        delay: t[3],
        residual: (2.0 * full.cost / m as f64).sqrt(),
        iterations: magnitude_stage.iterations + full.iterations,
    })
}

// ---------------------------------------------------------------------------
// KP weights

/// Lawson-Hanson active-set solution of `min |A x - b|` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (rows, cols) = a.shape();
    let mut x = DVector::zeros(cols);
    let mut passive = vec![false; cols];
    let tol = 10.0 * f64::EPSILON * a.norm() * rows.max(cols) as f64;
    let solve = |idx: &[usize]| -> DVector<f64> {
        let sub = a.select_columns(idx);
        let svd = sub.svd(true, true);
        let eps = 1e-13 * svd.singular_values.max();
        svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(idx.len()))
    };
    for _ in 0..3 * cols + 10 {
        let w = a.tr_mul(&(b - a * &x));
        let Some(j) = (0..cols)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &k| w[i].total_cmp(&w[k]))
        else {
            break;
        };
        passive[j] = true;
        for _ in 0..3 * cols + 10 {
            let idx: Vec<usize> = (0..cols).filter(|&i| passive[i]).collect();
            let s = solve(&idx);
            if s.iter().all(|&v| v > 0.0) {
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = s[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if s[k] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - s[k]));
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (s[k] - x[i]);
                if x[i] <= tol {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

/// Output of each operator (from its current state) over `u`, one column each.
pub fn kp_regressors(u: &[f64], grid: &[KpOperator]) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(u.len(), grid.len());
    for (j, op) in grid.iter().enumerate() {
        let mut op = op.clone();
        for (i, &v) in u.iter().enumerate() {
            a[(i, j)] = op.apply(v)?;
        }
    }
    Ok(a)
}

/// Columns of `a` that are linear combinations of earlier columns, each with the
/// earlier columns it depends on (sorted, including itself).
fn collinear_columns(a: &DMatrix<f64>) -> Option<Vec<usize>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut basis_cols: Vec<usize> = Vec::new();
    for j in 0..a.ncols() {
        let col = a.column(j).into_owned();
        let norm = col.norm();
        let mut v = col.clone();
        for q in &basis {
            let c = q.dot(&v);
            v -= q * c;
        }
        if norm == 0.0 || v.norm() <= 1e-9 * norm {
            let mut named = vec![j];
            if norm > 0.0 && !basis_cols.is_empty() {
                let sub = a.select_columns(&basis_cols);
                if let Ok(c) = sub.svd(true, true).solve(&col, 1e-12) {
                    named.extend(
                        basis_cols
                            .iter()
                            .zip(c.iter())
                            .filter(|(_, &c)| c.abs() > 1e-8)
                            .map(|(&i, _)| i),
                    );
                }
            }
            named.sort_unstable();
            return Some(named);
        }
        basis.push(v.normalize());
        basis_cols.push(j);
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFit {
    pub weights: Vec<f64>,
    pub rms: f64,
}

/// Nonnegative weights of `grid` reproducing `y` from input `u`.
///
/// Each grid operator starts from its current state. A regressor column that is
/// a linear combination of others yields [`Error::RankDeficient`] naming them.
pub fn fit_kp_weights(u: &[f64], y: &[f64], grid: &[KpOperator]) -> Result<WeightFit> {
    if u.len() != y.len() || u.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "input has {} samples, output {}",
            u.len(),
            y.len()
        )));
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty operator grid".into()));
    }
    let a = kp_regressors(u, grid)?;
    if let Some(cols) = collinear_columns(&a) {
        return Err(Error::RankDeficient(cols));
    }
    let b = DVector::from_column_slice(y);
    let x = nnls(&a, &b);
    let rms = ((&b - &a * &x).norm_squared() / y.len() as f64).sqrt();
    Ok(WeightFit {
        weights: x.iter().copied().collect(),
        rms,
    })
}

/// Causal critically damped low-pass at `cutoff_hz`, started in steady state at
/// the first sample.
pub fn prefilter(signal: &[f64], h: f64, cutoff_hz: f64) -> Result<Vec<f64>> {
    let Some(&x0) = signal.first() else {
        return Ok(Vec::new());
    };
    let tf = lowpass_filter(cutoff_hz)?;
    // unit DC gain, so removing the initial value removes the start-up transient
    let mut sys = discretize(&tf, h)?;
    Ok(signal
        .iter()
        .map(|&x| {
            sys.step(x - x0);
            sys.peek_output().unwrap_or(0.0) + x0
        })
        .collect())
}

fn default_prefilter() -> Option<f64> {
    Some(10.0)
}

/// Grid search over operator shapes `(delta, w)` at fixed `m` and `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSearch {
    pub operators: usize,
    pub m: f64,
    pub gamma: f64,
    pub delta_range: [f64; 2],
    pub delta_steps: usize,
    pub w_range: [f64; 2],
    pub w_steps: usize,
    pub max_sweeps: usize,
    /// Low-pass cutoff applied to input and output before fitting, Hz.
    #[serde(default = "default_prefilter")]
    pub prefilter_hz: Option<f64>,
    /// Keep every `decimate`-th sample after filtering.
    #[serde(default = "one")]
    pub decimate: usize,
}

fn one() -> usize {
    1
}

impl Default for ShapeSearch {
    fn default() -> Self {
        Self {
            operators: 3,
            m: 0.72,
            gamma: 1.0,
            delta_range: [-4.5, -0.5],
            delta_steps: 41,
            w_range: [0.0, 3.0],
            w_steps: 31,
            max_sweeps: 6,
            prefilter_hz: Some(10.0),
            decimate: 10,
        }
    }
}

fn grid_points(range: [f64; 2], steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![range[0]];
    }
    (0..steps)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (steps - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFit {
    pub params: KpModelParams,
    pub rms: f64,
    pub sweeps: usize,
}

/// Coordinate descent over operator shapes: each sweep moves one operator at a
/// time to the grid shape minimizing the nonnegative weight fit residual. The
/// first `warmup_s` seconds only set operator states and are not fitted.
pub fn fit_kp_shapes(u: &[f64], y: &[f64], h: f64, warmup_s: f64, search: &ShapeSearch) -> Result<ShapeFit> {
    if search.operators == 0 || search.decimate == 0 {
        return Err(Error::Config(
            "shape search needs operators >= 1 and decimate >= 1".into(),
        ));
    }
    if u.len() != y.len() {
        return Err(Error::InvalidParameter("input and output lengths differ".into()));
    }
    let (uf, yf) = match search.prefilter_hz {
        Some(fc) => (prefilter(u, h, fc)?, prefilter(y, h, fc)?),
        None => (u.to_vec(), y.to_vec()),
    };
    let u: Vec<f64> = uf.iter().step_by(search.decimate).copied().collect();
    let y: Vec<f64> = yf.iter().step_by(search.decimate).copied().collect();
    let warm = ((warmup_s / (h * search.decimate as f64)).round() as usize).min(u.len());
    if u.len() - warm < 2 {
        return Err(Error::InvalidParameter("no samples left after warm-up".into()));
    }

    let deltas = grid_points(search.delta_range, search.delta_steps);
    let widths = grid_points(search.w_range, search.w_steps);
    let make = |d: f64, w: f64| -> Result<KpOperator> {
        let mut op = KpOperator::new(d, w, search.m, search.gamma)?;
        for &v in &u[..warm] {
            op.apply(v)?;
        }
        Ok(op)
    };
    let evaluate = |shapes: &[(f64, f64)]| -> Option<WeightFit> {
        let ops: Vec<KpOperator> = shapes.iter().map(|&(d, w)| make(d, w)).collect::<Result<_>>().ok()?;
        fit_kp_weights(&u[warm..], &y[warm..], &ops).ok()
    };

    let n = search.operators;
    let w_mid = widths[widths.len() / 2];
    let mut shapes: Vec<(f64, f64)> = (0..n)
        .map(|i| (deltas[((2 * i + 1) * deltas.len()) / (2 * n)], w_mid))
        .collect();
    let mut best =
        evaluate(&shapes).ok_or_else(|| Error::InvalidParameter("initial operator shapes are degenerate".into()))?;
    let mut sweeps = 0;
    for _ in 0..search.max_sweeps {
        sweeps += 1;
        let mut improved = false;
        for i in 0..n {
            for &d in &deltas {
                for &w in &widths {
                    let mut trial = shapes.clone();
                    trial[i] = (d, w);
                    if let Some(fit) = evaluate(&trial) {
                        if fit.rms < best.rms * (1.0 - 1e-12) {
                            best = fit;
                            shapes = trial;
                            improved = true;
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    let operator: Vec<KpOperatorParams> = shapes
        .iter()
        .zip(&best.weights)
        .filter(|(_, &rho)| rho > 0.0)
        .map(|(&(delta, w), &rho)| KpOperatorParams {
            delta,
            w,
            m: search.m,
            gamma: search.gamma,
            rho,
            y0: 0.0,
        })
        .collect();
    if operator.is_empty() {
        return Err(Error::InvalidParameter("every fitted weight is zero".into()));
    }
    Ok(ShapeFit {
        params: KpModelParams {
            n: operator.len(),
            operator,
        },
        rms: best.rms,
        sweeps,
    })
}

// ---------------------------------------------------------------------------
// synthetic target loop and fixture

/// Input and output of the synthetic MSM-like target loop: two periods of a
/// 0..5 A, 0.1 Hz triangle at 2 kHz, with output
/// `0.5 tanh((i - c) / 0.5)`, `c = 3.0` A ascending and `c = 1.8` A descending.
pub fn synthetic_target_loop() -> Result<TimeSeries> {
    use crate::simulate::{make_reference, ReferenceSpec};
    let spec = ReferenceSpec::Triangle {
        amplitude: 2.5,
        frequency_hz: 0.1,
        offset: 2.5,
        phase_cycles: -0.25,
    };
    let mut ts = make_reference(&spec, 20.0, 2000.0, 0)?;
    let u = ts.require("reference")?.to_vec();
    let mut y = Vec::with_capacity(u.len());
    let mut ascending = true;
    for (k, &i) in u.iter().enumerate() {
        if k > 0 && u[k] != u[k - 1] {
            ascending = u[k] > u[k - 1];
        }
        let c = if ascending { 3.0 } else { 1.8 };
        y.push(0.5 * ((i - c) / 0.5).tanh());
    }
    ts = TimeSeries::new(ts.period())?.with("current", u)?.with("y", y)?;
    Ok(ts)
}

/// Regenerates the committed three-operator fixture: default [`ShapeSearch`] on
/// [`synthetic_target_loop`] with the first period as warm-up.
pub fn generate_fixture() -> Result<ShapeFit> {
    let ts = synthetic_target_loop()?;
    fit_kp_shapes(
        ts.require("current")?,
        ts.require("y")?,
        ts.period(),
        10.0,
        &ShapeSearch::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hysteresis::fixture_params;
    use crate::lti::{freq_response, plant_identified};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn frf_exact_on_noiseless_plant() {
        let g = plant_identified();
        for f in [1.0, 17.0, 117.0, 300.0] {
            let rec = synthetic_frf_record(&g, f, 1.0, 5.0, 2000.0, 0.0, 0).unwrap();
            let p = estimate_frf_point(&rec).unwrap();
            let truth = freq_response(&g, &[2.0 * PI * f])[0];
            assert!(
                (p.response - truth).norm() / truth.norm() < 1e-8,
                "{f}: {} vs {truth}",
                p.response
            );
        }
    }

    #[test]
    fn frf_unity_gain() {
        let g = TransferFunction::gain(1.0).unwrap();
        for f in [1.0, 33.0, 250.0] {
            let p = estimate_frf_point(&synthetic_frf_record(&g, f, 0.3, 4.0, 2000.0, 0.0, 0).unwrap()).unwrap();
            assert!((p.response - Complex64::new(1.0, 0.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn frf_noise_mid_band() {
        let g = plant_identified();
        let f = 50.0;
        let rec = synthetic_frf_record(&g, f, 1.0, 20.0, 2000.0, 8e-6, 42).unwrap();
        let p = estimate_frf_point(&rec).unwrap();
        let truth = freq_response(&g, &[2.0 * PI * f])[0];
        assert!(rel(p.response.norm(), truth.norm()) < 0.02);
    }

    #[test]
    fn frf_errors() {
        let g = plant_identified();
        let short = synthetic_frf_record(&g, 10.0, 1.0, 2.5, 2000.0, 0.0, 0).unwrap();
        assert!(matches!(estimate_frf_point(&short), Err(Error::RecordTooShort { .. })));
        let mut zero = synthetic_frf_record(&g, 10.0, 1.0, 4.0, 2000.0, 0.0, 0).unwrap();
        let n = zero.input.len();
        zero.input.insert("u", vec![0.0; n]).unwrap();
        assert!(matches!(estimate_frf_point(&zero), Err(Error::ZeroInputPhasor(_))));
    }

    #[test]
    fn frf_csv_round_trip() {
        let pts = vec![
            FrfPoint {
                frequency_hz: 1.0,
                response: Complex64::new(8.3e-5, -1.2e-7),
            },
            FrfPoint {
                frequency_hz: 100.0,
                response: Complex64::new(-2e-5, -4e-5),
            },
        ];
        let mut buf = Vec::new();
        write_frf_csv(&pts, &mut buf).unwrap();
        let back = read_frf_csv(buf.as_slice()).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            assert_eq!(a.frequency_hz, b.frequency_hz);
            assert!((a.response - b.response).norm() <= 1e-11 * a.response.norm());
        }
    }

    fn plant_points(tf: &TransferFunction) -> Vec<FrfPoint> {
        crate::lti::logspace(1.0, 300.0, 30)
            .into_iter()
            .map(|f| FrfPoint {
                frequency_hz: f,
                response: freq_response(tf, &[2.0 * PI * f])[0],
            })
            .collect()
    }

    #[test]
    fn sos_recovers_plant() {
        let fit = fit_sos_delay(&plant_points(&plant_identified())).unwrap();
        let tf = fit.transfer_function().unwrap();
        assert!(rel(tf.num()[0], 45.57) < 1e-6);
        assert!(rel(tf.den()[1], 737.9) < 1e-6);
        assert!(rel(tf.den()[2], 5.439e5) < 1e-6);
        assert!(rel(fit.delay, 0.002) < 1e-6);
        assert!(fit.residual < 1e-8);
    }

    #[test]
    fn sos_zero_delay_and_scaling() {
        let g = plant_identified().with_delay(0.0).unwrap();
        let fit = fit_sos_delay(&plant_points(&g)).unwrap();
        assert!(fit.delay.abs() < 1e-5);
        let base = fit_sos_delay(&plant_points(&plant_identified())).unwrap();
        let scaled: Vec<FrfPoint> = plant_points(&plant_identified())
            .into_iter()
            .map(|p| FrfPoint {
                response: p.response * 37.0,
                ..p
            })
            .collect();
        let s = fit_sos_delay(&scaled).unwrap();
        assert!(rel(s.gain, 37.0 * base.gain) < 1e-8);
        assert!(rel(s.omega_n, base.omega_n) < 1e-8);
        assert!(rel(s.zeta, base.zeta) < 1e-8);
        assert!(rel(s.delay, base.delay) < 1e-8);
    }

    #[test]
    fn sos_with_multiplicative_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 0.02).unwrap();
        let pts: Vec<FrfPoint> = plant_points(&plant_identified())
            .into_iter()
            .map(|p| FrfPoint {
                response: p.response * Complex64::new(1.0 + n.sample(&mut rng), n.sample(&mut rng)),
                ..p
            })
            .collect();
        let fit = fit_sos_delay(&pts).unwrap();
        let (wn, z) = plant_identified().second_order_params().unwrap();
        assert!(rel(fit.gain, 45.57) < 0.05);
        assert!(rel(fit.omega_n, wn) < 0.05);
        assert!(rel(fit.zeta, z) < 0.05);
        assert!(rel(fit.delay, 0.002) < 0.05);
    }

    #[test]
    fn sos_needs_six_points() {
        let pts = plant_points(&plant_identified());
        assert!(matches!(fit_sos_delay(&pts[..5]), Err(Error::InvalidParameter(_))));
    }

    fn triangle_input(cycles: usize) -> Vec<f64> {
        let spec = crate::simulate::ReferenceSpec::Triangle {
            amplitude: 2.5,
            frequency_hz: 1.0,
            offset: 2.5,
            phase_cycles: -0.25,
        };
        let ts = crate::simulate::make_reference(&spec, cycles as f64, 400.0, 0).unwrap();
        ts.channel("reference").unwrap().to_vec()
    }

    #[test]
    fn weights_exact_recovery() {
        let model = crate::hysteresis::KpModel::from_params(&fixture_params()).unwrap();
        let u = triangle_input(2);
        let mut m = model.clone();
        let y: Vec<f64> = u.iter().map(|&v| m.apply(v).unwrap()).collect();
        let mut grid: Vec<KpOperator> = model.operators().to_vec();
        grid.push(KpOperator::new(-1.0, 0.4, 0.72, 1.0).unwrap());
        grid.push(KpOperator::new(-4.0, 2.0, 0.72, 1.0).unwrap());
        let fit = fit_kp_weights(&u, &y, &grid).unwrap();
        for (got, want) in fit.weights.iter().zip(model.weights()) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(fit.weights[3..].iter().all(|w| w.abs() < 1e-6));
        assert!(fit.rms < 1e-9);
    }

    #[test]
    fn weights_zero_output() {
        let u = triangle_input(1);
        let grid = vec![
            KpOperator::new(-2.0, 1.0, 0.72, 1.0).unwrap(),
            KpOperator::new(-3.0, 0.5, 0.72, 1.0).unwrap(),
        ];
        let fit = fit_kp_weights(&u, &vec![0.0; u.len()], &grid).unwrap();
        assert!(fit.weights.iter().all(|&w| w == 0.0));
        assert_eq!(fit.rms, 0.0);
    }

    #[test]
    fn weights_rank_deficient_names_operators() {
        let u = triangle_input(1);
        let y = vec![0.1; u.len()];
        let grid = vec![
            KpOperator::new(-2.0, 1.0, 0.72, 1.0).unwrap(),
            KpOperator::new(-3.0, 0.5, 0.72, 1.0).unwrap(),
            KpOperator::new(-2.0, 1.0, 0.72, 2.0).unwrap(),
        ];
        match fit_kp_weights(&u, &y, &grid) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec![0, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn residual_non_increasing_on_superset_grid() {
        let u = triangle_input(2);
        let y: Vec<f64> = u.iter().map(|&v| 0.5 * ((v - 2.4) / 0.7).tanh()).collect();
        let mut grid = vec![KpOperator::new(-2.4, 1.0, 0.72, 1.0).unwrap()];
        let mut last = fit_kp_weights(&u, &y, &grid).unwrap().rms;
        for (d, w) in [(-3.0, 0.5), (-1.8, 0.5), (-2.4, 2.0), (-4.0, 0.2)] {
            grid.push(KpOperator::new(d, w, 0.72, 1.0).unwrap());
            let rms = fit_kp_weights(&u, &y, &grid).unwrap().rms;
            assert!(rms <= last * (1.0 + 1e-12), "{rms} > {last}");
            last = rms;
        }
    }

    #[test]
    fn prefilter_preserves_constants() {
        let x = vec![3.25; 500];
        assert!(prefilter(&x, 5e-4, 10.0)
            .unwrap()
            .iter()
            .all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn committed_fixture_matches_generator() {
        let fit = generate_fixture().unwrap();
        let committed = fixture_params();
        assert_eq!(fit.params.n, committed.n);
        for (a, b) in fit.params.operator.iter().zip(&committed.operator) {
            assert!((a.delta - b.delta).abs() < 1e-9);
            assert!((a.w - b.w).abs() < 1e-9);
            assert!((a.rho - b.rho).abs() < 1e-9 * b.rho);
        }
    }

    /// Rewrites `fixtures/kp_n3.toml`; run with `--ignored` after changing the generator.
    #[test]
    #[ignore]
    fn regenerate_fixture() {
        let fit = generate_fixture().unwrap();
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/kp_n3.toml");
        let text = format!(
            "# Synthetic three-operator KP fixture generated by ident::generate_fixture\n\
             # (rms misfit {:.3e} on the synthetic target loop).\n{}",
            fit.rms,
            fit.params.to_toml()
        );
        std::fs::write(path, text).unwrap();
    }
}
