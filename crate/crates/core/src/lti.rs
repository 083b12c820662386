//! Continuous SISO transfer functions with a pure input delay, their exact
//! zero-order-hold discretization and frequency responses.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{finite, Error, Result};

/// Sample rate of the actuator loop, Hz.
pub const LOOP_RATE_HZ: f64 = 2000.0;

/// Rational transfer function `num(s) / den(s) * exp(-delay * s)`, coefficients in
/// descending powers of `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
    delay: f64,
}

fn trim_leading_zeros(c: &[f64]) -> Vec<f64> {
    let first = c.iter().position(|&x| x != 0.0).unwrap_or(c.len());
    c[first..].to_vec()
}

pub fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Horner evaluation of a descending-power polynomial at a complex point.
pub fn poly_eval(c: &[f64], s: Complex64) -> Complex64 {
    c.iter().fold(Complex64::new(0.0, 0.0), |acc, &x| acc * s + x)
}

impl TransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>, delay: f64) -> Result<Self> {
        for &c in num.iter().chain(&den) {
            finite(c, "transfer function coefficient")?;
        }
        finite(delay, "delay")?;
        if delay < 0.0 {
            return Err(Error::InvalidParameter(format!("negative delay {delay}")));
        }
        let den = trim_leading_zeros(&den);
        if den.is_empty() {
            return Err(Error::InvalidParameter("denominator is identically zero".into()));
        }
        let mut num = trim_leading_zeros(&num);
        if num.is_empty() {
            num.push(0.0);
        }
        if num.len() > den.len() {
            return Err(Error::Improper {
                num: num.len() - 1,
                den: den.len() - 1,
            });
        }
        Ok(Self { num, den, delay })
    }

    pub fn gain(k: f64) -> Result<Self> {
        Self::new(vec![k], vec![1.0], 0.0)
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn order(&self) -> usize {
        self.den.len() - 1
    }

    pub fn relative_degree(&self) -> usize {
        self.den.len() - self.num.len()
    }

    pub fn with_delay(mut self, delay: f64) -> Result<Self> {
        finite(delay, "delay")?;
        if delay < 0.0 {
            return Err(Error::InvalidParameter(format!("negative delay {delay}")));
        }
        self.delay = delay;
        Ok(self)
    }

    /// Series connection; delays add.
    pub fn series(&self, other: &Self) -> Self {
        Self {
            num: poly_mul(&self.num, &other.num),
            den: poly_mul(&self.den, &other.den),
            delay: self.delay + other.delay,
        }
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.eval_rational(s) * (-s * self.delay).exp()
    }

    /// Value of the rational part only.
    pub fn eval_rational(&self, s: Complex64) -> Complex64 {
        poly_eval(&self.num, s) / poly_eval(&self.den, s)
    }

    pub fn dc_gain(&self) -> f64 {
        self.num.last().copied().unwrap_or(0.0) / self.den.last().copied().unwrap_or(0.0)
    }

    /// Roots of the denominator (companion-matrix eigenvalues).
    pub fn poles(&self) -> Vec<Complex64> {
        roots(&self.den)
    }

    /// `(omega_n, zeta)` of a second-order denominator.
    pub fn second_order_params(&self) -> Option<(f64, f64)> {
        if self.den.len() != 3 {
            return None;
        }
        let wn = (self.den[2] / self.den[0]).sqrt();
        Some((wn, self.den[1] / self.den[0] / (2.0 * wn)))
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.re < 0.0)
    }
}

/// Roots of a descending-power polynomial.
pub fn roots(c: &[f64]) -> Vec<Complex64> {
    let c = trim_leading_zeros(c);
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        comp[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    comp.complex_eigenvalues().iter().copied().collect()
}

/// `G(s) = 45.57 e^{-0.002 s} / (s^2 + 737.9 s + 5.439e5)`, command current (A) to
/// displacement (m).
pub fn plant_identified() -> TransferFunction {
    TransferFunction::new(vec![45.57], vec![1.0, 737.9, 5.439e5], 0.002).expect("constant plant")
}

/// Second-order low-pass `(mu s + 1)^-2`, `mu = 1 / (2 pi f_c)`.
pub fn lowpass_filter(cutoff_hz: f64) -> Result<TransferFunction> {
    finite(cutoff_hz, "cutoff frequency")?;
    if cutoff_hz <= 0.0 {
        return Err(Error::InvalidParameter(format!("cutoff {cutoff_hz} Hz <= 0")));
    }
    let mu = 1.0 / (2.0 * PI * cutoff_hz);
    TransferFunction::new(vec![1.0], vec![mu * mu, 2.0 * mu, 1.0], 0.0)
}

pub fn freq_response(tf: &TransferFunction, omegas: &[f64]) -> Vec<Complex64> {
    omegas.iter().map(|&w| tf.eval(Complex64::new(0.0, w))).collect()
}

/// One Bode sample: magnitude and continuous phase in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodePoint {
    pub omega: f64,
    pub magnitude: f64,
    pub phase_deg: f64,
}

/// Bode data over ascending `omegas`. The rational phase is unwrapped from the first
/// frequency and the delay contributes `-omega * delay` exactly.
pub fn bode(tf: &TransferFunction, omegas: &[f64]) -> Vec<BodePoint> {
    let mut out = Vec::with_capacity(omegas.len());
    let mut prev: Option<f64> = None;
    for &w in omegas {
        let g = tf.eval_rational(Complex64::new(0.0, w));
        let mut ph = g.arg();
        if let Some(p) = prev {
            ph = unwrap_near(ph, p);
        }
        prev = Some(ph);
        out.push(BodePoint {
            omega: w,
            magnitude: g.norm(),
            phase_deg: (ph - w * tf.delay).to_degrees(),
        });
    }
    out
}

/// Shifts `phase` by multiples of 2 pi to lie within pi of `reference`.
pub fn unwrap_near(phase: f64, reference: f64) -> f64 {
    phase - 2.0 * PI * ((phase - reference) / (2.0 * PI)).round()
}

/// `n` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

/// State-space realization stepped at a fixed period with an integer input delay.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    phi: DMatrix<f64>,
    gamma: DVector<f64>,
    c: DVector<f64>,
    d: f64,
    period: f64,
    delay_samples: usize,
    buffer: VecDeque<f64>,
    x: DVector<f64>,
    scratch: DVector<f64>,
}

/// Exact zero-order-hold discretization of `tf` at period `h`.
///
/// The realization is controllable canonical form, diagonally rescaled by powers of
/// `|a_n|^(1/n)` so that the matrix exponential sees entries of comparable size.
pub fn discretize(tf: &TransferFunction, h: f64) -> Result<DiscreteSystem> {
    finite(h, "sample period")?;
    if h <= 0.0 {
        return Err(Error::InvalidParameter(format!("sample period {h} <= 0")));
    }
    let ratio = tf.delay / h;
    let delay_samples = ratio.round();
    if (ratio - delay_samples).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::NonIntegerDelay {
            delay: tf.delay,
            period: h,
        });
    }
    let delay_samples = delay_samples as usize;

    let n = tf.order();
    let lead = tf.den[0];
    let a: Vec<f64> = tf.den[1..].iter().map(|x| x / lead).collect();
    let mut b = vec![0.0; n + 1 - tf.num.len()];
    b.extend(tf.num.iter().map(|x| x / lead));
    let d = b[0];

    let (phi, gamma, c) = if n == 0 {
        (DMatrix::zeros(0, 0), DVector::zeros(0), DVector::zeros(0))
    } else {
        let sigma = {
            let s = a[n - 1].abs().powf(1.0 / n as f64);
            if s.is_finite() && s > 0.0 {
                s
            } else {
                1.0
            }
        };
        // x = T x~, T = diag(sigma^(n-1), ..., sigma, 1)
        let t: Vec<f64> = (0..n).map(|i| sigma.powi((n - 1 - i) as i32)).collect();
        let mut m = DMatrix::<f64>::zeros(n + 1, n + 1);
        for j in 0..n {
            m[(0, j)] = -a[j] * t[j] / t[0] * h;
        }
        for i in 1..n {
            m[(i, i - 1)] = t[i - 1] / t[i] * h;
        }
        m[(0, n)] = h / t[0];
        let e = m.exp();
        let phi = e.view((0, 0), (n, n)).into_owned();
        let gamma = e.view((0, n), (n, 1)).column(0).into_owned();
        let c = DVector::from_iterator(n, (0..n).map(|i| (b[i + 1] - d * a[i]) * t[i]));
        (phi, gamma, c)
    };

    Ok(DiscreteSystem {
        phi,
        gamma,
        c,
        d,
        period: h,
        delay_samples,
        buffer: VecDeque::from(vec![0.0; delay_samples]),
        x: DVector::zeros(n),
        scratch: DVector::zeros(n),
    })
}

impl DiscreteSystem {
    pub fn order(&self) -> usize {
        self.x.len()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn delay_samples(&self) -> usize {
        self.delay_samples
    }

    pub fn feedthrough(&self) -> f64 {
        self.d
    }

    pub fn state(&self) -> &[f64] {
        self.x.as_slice()
    }

    pub fn reset(&mut self) {
        self.x.fill(0.0);
        self.buffer.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Output of the current sample, available before the current input is known
    /// whenever the system has no direct path (zero feedthrough or a delay).
    pub fn peek_output(&self) -> Option<f64> {
        let cx = self.c.dot(&self.x);
        if self.d == 0.0 {
            Some(cx)
        } else {
            self.buffer.front().map(|w| cx + self.d * w)
        }
    }

    /// Feeds `u` through the delay line, returns the current output and advances one period.
    pub fn step(&mut self, u: f64) -> f64 {
        let w = if self.delay_samples > 0 {
            self.buffer.push_back(u);
            self.buffer.pop_front().unwrap_or(0.0)
        } else {
            u
        };
        let y = self.c.dot(&self.x) + self.d * w;
        if !self.x.is_empty() {
            self.scratch.copy_from(&self.gamma);
            self.scratch.gemv(1.0, &self.phi, &self.x, w);
            std::mem::swap(&mut self.x, &mut self.scratch);
        }
        y
    }

    pub fn simulate(&mut self, input: &[f64]) -> Vec<f64> {
        input.iter().map(|&u| self.step(u)).collect()
    }
}
