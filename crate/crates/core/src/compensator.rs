//! Inversion-free feedforward compensation.
//!
//! An integrator closes a loop around an internal copy of the hysteresis model,
//! `du/dt = g (y* - H(u))`, so that `u` settles where the model reproduces the
//! reference. Stepped by explicit Euler at the loop period, with the model
//! evaluated at the pre-update `u`.

use crate::error::{finite, Error, Result};
use crate::hysteresis::KpModel;
use crate::timeseries::TimeSeries;

/// Largest loop gain for which the Euler-stepped loop contracts on a slope of
/// total gain `gamma_tot`: `h * g * gamma_tot < 2`.
pub fn euler_gain_limit(h: f64, gamma_tot: f64) -> f64 {
    2.0 / (h * gamma_tot)
}

pub fn is_euler_stable(h: f64, gain: f64, gamma_tot: f64) -> bool {
    h * gain * gamma_tot < 2.0
}

#[derive(Debug, Clone)]
pub struct Compensator {
    model: KpModel,
    gain: f64,
    u: f64,
    estimate: f64,
    limits: Option<(f64, f64)>,
}

impl Compensator {
    pub fn new(model: KpModel, gain: f64) -> Result<Self> {
        finite(gain, "compensator gain")?;
        if gain <= 0.0 {
            return Err(Error::InvalidParameter(format!("compensator gain {gain} <= 0")));
        }
        let estimate = model.output();
        Ok(Self {
            model,
            gain,
            u: 0.0,
            estimate,
            limits: None,
        })
    }

    pub fn with_limits(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!("output limits [{lo}, {hi}]")));
        }
        self.limits = Some((lo, hi));
        self.u = self.u.clamp(lo, hi);
        Ok(self)
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn output(&self) -> f64 {
        self.u
    }

    /// Internal model output from the most recent step.
    pub fn estimate(&self) -> f64 {
        self.estimate
    }

    pub fn model(&self) -> &KpModel {
        &self.model
    }

    /// `2 - h * g * max_gain`; positive means the loop is stable on every slope.
    pub fn stability_margin(&self, h: f64) -> f64 {
        2.0 - h * self.gain * self.model.max_gain()
    }

    pub fn reset(&mut self, y0: f64, u0: f64) -> Result<()> {
        finite(u0, "initial compensator output")?;
        self.model.reset_output(y0)?;
        self.estimate = self.model.output();
        self.u = match self.limits {
            Some((lo, hi)) => u0.clamp(lo, hi),
            None => u0,
        };
        Ok(())
    }

    pub fn step(&mut self, y_star: f64, h: f64) -> Result<f64> {
        finite(y_star, "reference")?;
        let y_hat = self.model.apply(self.u)?;
        self.estimate = y_hat;
        let mut u = self.u + h * self.gain * (y_star - y_hat);
        if let Some((lo, hi)) = self.limits {
            u = u.clamp(lo, hi);
        }
        finite(u, "compensator output")?;
        self.u = u;
        Ok(u)
    }
}

/// Flags a constant reference the compensator cannot reach: the error magnitude
/// stops decreasing for `window` samples while staying above `tolerance`.
#[derive(Debug, Clone)]
pub struct NoProgressMonitor {
    window: usize,
    tolerance: f64,
    reference: f64,
    best: f64,
    since_best: usize,
}

impl NoProgressMonitor {
    pub fn new(window: usize, tolerance: f64) -> Self {
        Self {
            window: window.max(1),
            tolerance,
            reference: f64::NAN,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Returns true when the stall condition holds at this sample.
    pub fn update(&mut self, y_star: f64, error: f64) -> bool {
        let e = error.abs();
        if y_star != self.reference {
            self.reference = y_star;
            self.best = e;
            self.since_best = 0;
            return false;
        }
        if e < self.best * (1.0 - 1e-12) {
            self.best = e;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.window && e > self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct CompensationOptions {
    pub gain: f64,
    pub y0: f64,
    pub u0: f64,
    pub u_limits: Option<(f64, f64)>,
    /// Stall window of the unreachable-reference monitor, seconds.
    pub stall_window_s: f64,
}

impl Default for CompensationOptions {
    fn default() -> Self {
        Self {
            gain: 2000.0,
            y0: 0.0,
            u0: 0.0,
            u_limits: None,
            stall_window_s: 2.0,
        }
    }
}

/// Runs the compensator over the first channel of `reference`.
///
/// Output channels: `u`, `y_hat` (internal model at the pre-update `u`) and
/// `y_star`. Metadata `unreachable` is `true` when the stall monitor fired, with
/// `unreachable_at_s` the first time it did.
pub fn run_compensation(model: KpModel, reference: &TimeSeries, options: &CompensationOptions) -> Result<TimeSeries> {
    let y_star = reference
        .names()
        .next()
        .and_then(|n| reference.channel(n))
        .ok_or_else(|| Error::InvalidParameter("reference has no channel".into()))?;
    let h = reference.period();
    let tolerance = 1e-9 * 2.0 * model.bound();
    let mut comp = Compensator::new(model, options.gain)?;
    if let Some((lo, hi)) = options.u_limits {
        comp = comp.with_limits(lo, hi)?;
    }
    comp.reset(options.y0, options.u0)?;

    let window = (options.stall_window_s / h).round() as usize;
    let mut monitor = NoProgressMonitor::new(window, tolerance);
    let mut stalled_at = None;
    let mut u = Vec::with_capacity(y_star.len());
    let mut y_hat = Vec::with_capacity(y_star.len());
    for (k, &r) in y_star.iter().enumerate() {
        // u is recorded before the update so that y_hat = H(u) sample-wise
        u.push(comp.output());
        comp.step(r, h)?;
        let est = comp.estimate();
        if monitor.update(r, r - est) && stalled_at.is_none() {
            stalled_at = Some(k);
        }
        y_hat.push(est);
    }

    let mut out = TimeSeries::new(h)?.with_start(reference.start());
    out.insert("u", u)?;
    out.insert("y_hat", y_hat)?;
    out.insert("y_star", y_star.to_vec())?;
    out.metadata
        .insert("unreachable".into(), stalled_at.is_some().to_string());
    if let Some(k) = stalled_at {
        out.metadata
            .insert("unreachable_at_s".into(), reference.time(k).to_string());
    }
    out.metadata.insert("gain".into(), options.gain.to_string());
    Ok(out)
}
