//! PI feedback, open-loop composition and stability margins.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{finite, Error, Result};
use crate::lti::{bode, logspace, unwrap_near, TransferFunction};

/// Gains of the reference loop design.
pub const NOMINAL_KP: f64 = 1.13e4;
pub const NOMINAL_KI: f64 = 3.06e5;

/// Scan band of the margin solver, rad/s.
pub const MARGIN_BAND: (f64, f64) = (1e-1, 1e5);
const MARGIN_GRID: usize = 6001;

/// Discrete PI controller, forward-Euler integrator, optional output clamp with
/// conditional integration.
#[derive(Debug, Clone)]
pub struct PiController {
    kp: f64,
    ki: f64,
    h: f64,
    integ: f64,
    limits: Option<(f64, f64)>,
    anti_windup: bool,
}

impl PiController {
    pub fn new(kp: f64, ki: f64, h: f64) -> Result<Self> {
        finite(kp, "kp")?;
        finite(ki, "ki")?;
        finite(h, "sample period")?;
        if kp <= 0.0 || ki <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "PI gains must be > 0, got kp = {kp}, ki = {ki}"
            )));
        }
        if h <= 0.0 {
            return Err(Error::InvalidParameter(format!("sample period {h} <= 0")));
        }
        Ok(Self {
            kp,
            ki,
            h,
            integ: 0.0,
            limits: None,
            anti_windup: false,
        })
    }

    pub fn with_limits(mut self, lo: f64, hi: f64, anti_windup: bool) -> Result<Self> {
        self.set_limits(lo, hi)?;
        self.anti_windup = anti_windup;
        Ok(self)
    }

    /// Moves the clamp interval, e.g. around a feedforward offset.
    pub fn set_limits(&mut self, lo: f64, hi: f64) -> Result<()> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::InvalidParameter(format!("PI limits [{lo}, {hi}]")));
        }
        self.limits = Some((lo, hi));
        Ok(())
    }

    pub fn kp(&self) -> f64 {
        self.kp
    }

    pub fn ki(&self) -> f64 {
        self.ki
    }

    pub fn integral(&self) -> f64 {
        self.integ
    }

    pub fn reset(&mut self) {
        self.integ = 0.0;
    }

    pub fn step(&mut self, e: f64) -> Result<f64> {
        finite(e, "control error")?;
        let integ = self.integ + self.h * e;
        let raw = self.kp * e + self.ki * integ;
        let Some((lo, hi)) = self.limits else {
            self.integ = integ;
            return Ok(raw);
        };
        let winding = (raw > hi && e > 0.0) || (raw < lo && e < 0.0);
        if self.anti_windup && winding {
            return Ok((self.kp * e + self.ki * self.integ).clamp(lo, hi));
        }
        self.integ = integ;
        Ok(raw.clamp(lo, hi))
    }
}

/// `C(s) = (kp s + ki) / s`.
pub fn pi_transfer_function(kp: f64, ki: f64) -> Result<TransferFunction> {
    TransferFunction::new(vec![kp, ki], vec![1.0, 0.0], 0.0)
}

/// `L(s) = C(s) G(s) F(s)`.
pub fn open_loop(kp: f64, ki: f64, plant: &TransferFunction, filter: &TransferFunction) -> Result<TransferFunction> {
    Ok(pi_transfer_function(kp, ki)?.series(plant).series(filter))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginReport {
    pub phase_margin_deg: f64,
    /// `+inf` when the phase never reaches -180 deg inside the band.
    pub gain_margin_db: f64,
    pub gain_crossover_rad_s: f64,
    pub phase_crossover_rad_s: Option<f64>,
}

impl std::fmt::Display for MarginReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "phase_margin_deg = {:.6}", self.phase_margin_deg)?;
        writeln!(f, "gain_margin_db = {:.6}", self.gain_margin_db)?;
        writeln!(f, "gain_crossover_rad_s = {:.6}", self.gain_crossover_rad_s)?;
        match self.phase_crossover_rad_s {
            Some(w) => writeln!(f, "phase_crossover_rad_s = {w:.6}"),
            None => writeln!(f, "phase_crossover_rad_s = none"),
        }
    }
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let f_lo = f(lo);
    if f_lo == 0.0 {
        return lo;
    }
    if f(hi) == 0.0 {
        return hi;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    (lo * hi).sqrt()
}

/// Margins at the lowest gain crossover of `l` inside [`MARGIN_BAND`].
///
/// Crossovers are bracketed on a log grid and refined by bisection. Phase is the
/// rational phase unwrapped from the low end of the band minus `omega * delay`.
pub fn stability_margins(l: &TransferFunction) -> Result<MarginReport> {
    let (lo, hi) = MARGIN_BAND;
    let omegas = logspace(lo, hi, MARGIN_GRID);
    let pts = bode(l, &omegas);
    let rational_phase = |w: f64, near: f64| unwrap_near(l.eval_rational(Complex64::new(0.0, w)).arg(), near);
    let log_mag = |w: f64| l.eval_rational(Complex64::new(0.0, w)).norm().ln();

    let gc = pts
        .windows(2)
        .find(|p| (p[0].magnitude >= 1.0) != (p[1].magnitude >= 1.0))
        .ok_or(Error::NoCrossover { lo, hi })?;
    let w_gc = bisect(gc[0].omega, gc[1].omega, log_mag);
    let near = gc[0].phase_deg.to_radians() + gc[0].omega * l.delay();
    let phase_gc = rational_phase(w_gc, near) - w_gc * l.delay();
    let phase_margin_deg = 180.0 + phase_gc.to_degrees();

    // lowest crossing of -180 deg (mod 360) by the continuous total phase
    let level = |phase_deg: f64| ((phase_deg + 180.0) / 360.0).floor();
    let pc = pts.windows(2).find(|p| level(p[0].phase_deg) != level(p[1].phase_deg));
    let (gain_margin_db, phase_crossover_rad_s) = match pc {
        None => (f64::INFINITY, None),
        Some(p) => {
            let target = level(p[0].phase_deg.max(p[1].phase_deg)) * 360.0 - 180.0;
            let near0 = p[0].phase_deg.to_radians() + p[0].omega * l.delay();
            let total = |w: f64| (rational_phase(w, near0) - w * l.delay()).to_degrees() - target;
            let w_pc = bisect(p[0].omega, p[1].omega, total);
            let mag = l.eval_rational(Complex64::new(0.0, w_pc)).norm();
            (-20.0 * mag.log10(), Some(w_pc))
        }
    };

    Ok(MarginReport {
        phase_margin_deg,
        gain_margin_db,
        gain_crossover_rad_s: w_gc,
        phase_crossover_rad_s,
    })
}

/// One evaluated gain pair of a loop-shaping sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapePoint {
    pub kp: f64,
    pub ki: f64,
    /// Gain crossover frequency, rad/s.
    pub bandwidth: f64,
    pub phase_margin_deg: f64,
}

/// Sweeps PI gains over a grid and returns the Pareto set maximizing both
/// crossover frequency and phase margin, sorted by bandwidth. Pairs without a
/// crossover or with non-positive phase margin are dropped.
pub fn shape(
    plant: &TransferFunction,
    filter: &TransferFunction,
    kp_grid: &[f64],
    ki_grid: &[f64],
) -> Result<Vec<ShapePoint>> {
    let mut points = Vec::new();
    for &kp in kp_grid {
        for &ki in ki_grid {
            let l = open_loop(kp, ki, plant, filter)?;
            match stability_margins(&l) {
                Ok(m) if m.phase_margin_deg > 0.0 && m.gain_margin_db > 0.0 => points.push(ShapePoint {
                    kp,
                    ki,
                    bandwidth: m.gain_crossover_rad_s,
                    phase_margin_deg: m.phase_margin_deg,
                }),
                Ok(_) | Err(Error::NoCrossover { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let dominated = |p: &ShapePoint| {
        points.iter().any(|q| {
            q.bandwidth >= p.bandwidth
                && q.phase_margin_deg >= p.phase_margin_deg
                && (q.bandwidth > p.bandwidth || q.phase_margin_deg > p.phase_margin_deg)
        })
    };
    let mut front: Vec<ShapePoint> = points.iter().filter(|p| !dominated(p)).copied().collect();
    front.sort_by(|a, b| a.bandwidth.total_cmp(&b.bandwidth));
    Ok(front)
}

/// Degrees of phase lag a pure delay adds at `omega`.
pub fn delay_phase_deg(delay: f64, omega: f64) -> f64 {
    -omega * delay * 180.0 / PI
}
