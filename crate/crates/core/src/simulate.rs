//! Closed-loop scenario engine: reference generators, the hysteresis + linear
//! plant, and the feedback-only / feedforward-only / two-dof loop.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compensator::Compensator;
use crate::error::{finite, Error, Result};
use crate::feedback::{PiController, NOMINAL_KI, NOMINAL_KP};
use crate::hysteresis::{fixture_params, KpModel, KpModelParams};
use crate::lti::{discretize, lowpass_filter, plant_identified, DiscreteSystem, LOOP_RATE_HZ};
use crate::timeseries::TimeSeries;

/// Maximal actuator stroke, m.
pub const STROKE_M: f64 = 500e-6;
/// Laser sensor repeatability used as measurement noise std, m.
pub const SENSOR_NOISE_STD_M: f64 = 8e-6;
/// Command current range, A.
pub const CURRENT_RANGE_A: (f64, f64) = (0.0, 5.0);

/// Gain between the fixture's hysteresis output (referenced to its lower
/// saturation) and the plant input, chosen so that the full hysteresis span
/// `2 * bound` maps through the DC gain of the identified plant onto [`STROKE_M`]:
/// `kappa = STROKE_M / (2 * bound * G(0))`.
pub fn kappa_for_stroke(model: &KpModel, dc_gain: f64, stroke: f64) -> f64 {
    stroke / (2.0 * model.bound() * dc_gain)
}

/// [`kappa_for_stroke`] of the committed fixture and the identified plant.
pub fn default_kappa_tilde() -> f64 {
    let model = KpModel::from_params(&fixture_params()).expect("fixture");
    kappa_for_stroke(&model, plant_identified().dc_gain(), STROKE_M)
}

// ---------------------------------------------------------------------------
// references

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `initial` before `start_s`, `initial + height` from then on.
    Step {
        height: f64,
        #[serde(default)]
        start_s: f64,
        #[serde(default)]
        initial: f64,
    },
    Sine {
        amplitude: f64,
        frequency_hz: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        phase_deg: f64,
    },
    /// Zero at cycle 0, `+amplitude` at a quarter cycle, `-amplitude` at three
    /// quarters; `phase_cycles = -0.25` starts at the minimum.
    Triangle {
        amplitude: f64,
        frequency_hz: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        phase_cycles: f64,
    },
    /// Raised-cosine carrier `offset + A_k (1 - cos(2 pi f t)) / 2`, with a fresh
    /// amplitude `A_k` drawn uniformly per carrier period.
    RandomAmplitude {
        carrier_hz: f64,
        min_amplitude: f64,
        max_amplitude: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Piecewise-constant levels, each held for `hold_s`; the last level persists.
    Staircase { levels: Vec<f64>, hold_s: f64 },
    /// `offset + A_k sin(2 pi f t)` with `A_k = amplitudes[k]` during period `k`
    /// (the last amplitude persists).
    ModulatedSine {
        frequency_hz: f64,
        amplitudes: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
}

fn positive(x: f64, what: &str) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be > 0, got {x}")))
    }
}

fn triangle_wave(cycles: f64) -> f64 {
    let x = cycles - cycles.floor();
    if x < 0.25 {
        4.0 * x
    } else if x < 0.75 {
        2.0 - 4.0 * x
    } else {
        4.0 * x - 4.0
    }
}

impl ReferenceSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ReferenceSpec::Step {
                height,
                start_s,
                initial,
            } => {
                for (v, w) in [(height, "height"), (start_s, "start_s"), (initial, "initial")] {
                    if !v.is_finite() {
                        return Err(Error::Config(format!("step {w} is not finite")));
                    }
                }
                Ok(())
            }
            ReferenceSpec::Sine {
                frequency_hz,
                amplitude,
                offset,
                phase_deg,
            } => {
                positive(*frequency_hz, "sine frequency_hz")?;
                if ![amplitude, offset, phase_deg].iter().all(|v| v.is_finite()) {
                    return Err(Error::Config("sine parameters must be finite".into()));
                }
                Ok(())
            }
            ReferenceSpec::Triangle {
                frequency_hz,
                amplitude,
                offset,
                phase_cycles,
            } => {
                positive(*frequency_hz, "triangle frequency_hz")?;
                if ![amplitude, offset, phase_cycles].iter().all(|v| v.is_finite()) {
                    return Err(Error::Config("triangle parameters must be finite".into()));
                }
                Ok(())
            }
            ReferenceSpec::RandomAmplitude {
                carrier_hz,
                min_amplitude,
                max_amplitude,
                offset,
                ..
            } => {
                positive(*carrier_hz, "carrier_hz")?;
                if !(min_amplitude.is_finite() && max_amplitude.is_finite() && offset.is_finite())
                    || min_amplitude > max_amplitude
                {
                    return Err(Error::Config(
                        "random-amplitude needs min_amplitude <= max_amplitude".into(),
                    ));
                }
                Ok(())
            }
            ReferenceSpec::Staircase { levels, hold_s } => {
                positive(*hold_s, "staircase hold_s")?;
                if levels.is_empty() || !levels.iter().all(|v| v.is_finite()) {
                    return Err(Error::Config("staircase needs finite levels".into()));
                }
                Ok(())
            }
            ReferenceSpec::ModulatedSine {
                frequency_hz,
                amplitudes,
                offset,
            } => {
                positive(*frequency_hz, "modulated-sine frequency_hz")?;
                if amplitudes.is_empty() || !amplitudes.iter().all(|v| v.is_finite()) || !offset.is_finite() {
                    return Err(Error::Config("modulated-sine needs finite amplitudes".into()));
                }
                Ok(())
            }
        }
    }
}

/// Samples `spec` at `sample_rate_hz` for `duration_s` into channel `reference`.
/// `seed` drives random amplitudes unless the spec carries its own.
pub fn make_reference(spec: &ReferenceSpec, duration_s: f64, sample_rate_hz: f64, seed: u64) -> Result<TimeSeries> {
    spec.validate()?;
    positive(duration_s, "duration_s")?;
    positive(sample_rate_hz, "sample_rate_hz")?;
    let n = (duration_s * sample_rate_hz).round() as usize;
    let t = |k: usize| k as f64 / sample_rate_hz;
    // cycles elapsed at sample k, computed as (k f) / fs to keep period arithmetic exact
    let cycles = |k: usize, f: f64| (k as f64 * f) / sample_rate_hz;
    let values: Vec<f64> = match spec {
        ReferenceSpec::Step {
            height,
            start_s,
            initial,
        } => (0..n)
            .map(|k| if t(k) >= *start_s { initial + height } else { *initial })
            .collect(),
        ReferenceSpec::Sine {
            amplitude,
            frequency_hz,
            offset,
            phase_deg,
        } => (0..n)
            .map(|k| offset + amplitude * (2.0 * PI * cycles(k, *frequency_hz) + phase_deg.to_radians()).sin())
            .collect(),
        ReferenceSpec::Triangle {
            amplitude,
            frequency_hz,
            offset,
            phase_cycles,
        } => (0..n)
            .map(|k| offset + amplitude * triangle_wave(cycles(k, *frequency_hz) + phase_cycles))
            .collect(),
        ReferenceSpec::RandomAmplitude {
            carrier_hz,
            min_amplitude,
            max_amplitude,
            offset,
            seed: own,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(own.unwrap_or(seed));
            let periods = (duration_s * carrier_hz).ceil() as usize + 1;
            let amps: Vec<f64> = (0..periods)
                .map(|_| {
                    if max_amplitude > min_amplitude {
                        rng.random_range(*min_amplitude..*max_amplitude)
                    } else {
                        *min_amplitude
                    }
                })
                .collect();
            (0..n)
                .map(|k| {
                    let c = cycles(k, *carrier_hz);
                    let a = amps[(c.floor() as usize).min(periods - 1)];
                    offset + a * 0.5 * (1.0 - (2.0 * PI * c).cos())
                })
                .collect()
        }
        ReferenceSpec::Staircase { levels, hold_s } => (0..n)
            .map(|k| {
                let i = ((t(k) / hold_s).floor() as usize).min(levels.len() - 1);
                levels[i]
            })
            .collect(),
        ReferenceSpec::ModulatedSine {
            frequency_hz,
            amplitudes,
            offset,
        } => (0..n)
            .map(|k| {
                let c = cycles(k, *frequency_hz);
                let a = amplitudes[(c.floor() as usize).min(amplitudes.len() - 1)];
                offset + a * (2.0 * PI * c).sin()
            })
            .collect(),
    };
    TimeSeries::new(1.0 / sample_rate_hz)?.with("reference", values)
}

// ---------------------------------------------------------------------------
// plant

/// Bounded additive signal on the hysteresis output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    #[default]
    None,
    Constant {
        value: f64,
        bound: f64,
    },
    Sine {
        amplitude: f64,
        frequency_hz: f64,
        bound: f64,
    },
    /// Independent uniform samples in `[-amplitude, amplitude]`.
    Uniform {
        amplitude: f64,
        bound: f64,
    },
}

impl DisturbanceSpec {
    pub fn bound(&self) -> f64 {
        match self {
            DisturbanceSpec::None => 0.0,
            DisturbanceSpec::Constant { bound, .. }
            | DisturbanceSpec::Sine { bound, .. }
            | DisturbanceSpec::Uniform { bound, .. } => *bound,
        }
    }

    fn validate(&self) -> Result<()> {
        let b = self.bound();
        if !(b.is_finite() && b >= 0.0) {
            return Err(Error::Config(format!("disturbance bound {b} must be >= 0")));
        }
        Ok(())
    }
}

struct DisturbanceSource {
    spec: DisturbanceSpec,
    rng: ChaCha8Rng,
    h: f64,
    k: usize,
}

impl DisturbanceSource {
    fn new(spec: DisturbanceSpec, seed: u64, h: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Self { spec, rng, h, k: 0 }
    }

    fn next(&mut self) -> f64 {
        let t = self.k as f64 * self.h;
        self.k += 1;
        let raw = match self.spec {
            DisturbanceSpec::None => 0.0,
            DisturbanceSpec::Constant { value, .. } => value,
            DisturbanceSpec::Sine {
                amplitude,
                frequency_hz,
                ..
            } => amplitude * (2.0 * PI * frequency_hz * t).sin(),
            DisturbanceSpec::Uniform { amplitude, .. } => {
                if amplitude > 0.0 {
                    self.rng.random_range(-amplitude..=amplitude)
                } else {
                    0.0
                }
            }
        };
        let b = self.spec.bound();
        raw.clamp(-b, b)
    }
}

/// Serial plant: current command -> KP hysteresis -> `kappa` -> identified linear
/// dynamics. The hysteresis output is referenced to its lower saturation so that
/// zero displacement corresponds to the fully retracted state.
#[derive(Debug, Clone)]
pub struct PlantModel {
    hysteresis: KpModel,
    linear: DiscreteSystem,
    kappa: f64,
    offset: f64,
    input_range: (f64, f64),
    disturbance_bound: f64,
    clamped_samples: usize,
}

impl PlantModel {
    pub fn new(hysteresis: KpModel, linear: DiscreteSystem, kappa: f64) -> Result<Self> {
        finite(kappa, "kappa_tilde")?;
        if kappa <= 0.0 {
            return Err(Error::InvalidParameter(format!("kappa_tilde {kappa} <= 0")));
        }
        let offset = hysteresis.bound();
        Ok(Self {
            hysteresis,
            linear,
            kappa,
            offset,
            input_range: CURRENT_RANGE_A,
            disturbance_bound: f64::INFINITY,
            clamped_samples: 0,
        })
    }

    /// Fixture hysteresis, identified plant at the loop rate, default `kappa`.
    pub fn nominal() -> Result<Self> {
        let linear = discretize(&plant_identified(), 1.0 / LOOP_RATE_HZ)?;
        Self::new(KpModel::from_params(&fixture_params())?, linear, default_kappa_tilde())
    }

    pub fn with_input_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!("input range [{lo}, {hi}]")));
        }
        self.input_range = (lo, hi);
        Ok(self)
    }

    pub fn with_disturbance_bound(mut self, bound: f64) -> Self {
        self.disturbance_bound = bound.abs();
        self
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn hysteresis(&self) -> &KpModel {
        &self.hysteresis
    }

    /// Samples whose command was outside the input range and got clamped.
    pub fn clamped_samples(&self) -> usize {
        self.clamped_samples
    }

    /// Displacement of the current sample, before this sample's command acts.
    pub fn peek_output(&self) -> f64 {
        self.linear
            .peek_output()
            .expect("identified plant has no direct feedthrough")
    }

    pub fn step(&mut self, i_cmd: f64, dist: f64) -> Result<f64> {
        finite(i_cmd, "current command")?;
        let (lo, hi) = self.input_range;
        let i = i_cmd.clamp(lo, hi);
        if i != i_cmd {
            self.clamped_samples += 1;
        }
        let d = dist.clamp(-self.disturbance_bound, self.disturbance_bound);
        let y_h = self.hysteresis.apply(i)? + self.offset + d;
        Ok(self.linear.step(self.kappa * y_h))
    }
}

// ---------------------------------------------------------------------------
// scenarios

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopMode {
    FeedbackOnly,
    FeedforwardOnly,
    TwoDof,
}

impl LoopMode {
    pub const ALL: [LoopMode; 3] = [LoopMode::FeedbackOnly, LoopMode::FeedforwardOnly, LoopMode::TwoDof];

    pub fn name(self) -> &'static str {
        match self {
            LoopMode::FeedbackOnly => "feedback-only",
            LoopMode::FeedforwardOnly => "feedforward-only",
            LoopMode::TwoDof => "two-dof",
        }
    }

    fn has_feedback(self) -> bool {
        self != LoopMode::FeedforwardOnly
    }

    fn has_feedforward(self) -> bool {
        self != LoopMode::FeedbackOnly
    }
}

fn default_mode() -> LoopMode {
    LoopMode::TwoDof
}
fn default_rate() -> f64 {
    LOOP_RATE_HZ
}
fn default_noise() -> f64 {
    SENSOR_NOISE_STD_M
}
fn default_kp() -> f64 {
    NOMINAL_KP
}
fn default_ki() -> f64 {
    NOMINAL_KI
}
fn default_cutoff() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}
fn default_comp_gain() -> f64 {
    2000.0
}
fn default_one() -> f64 {
    1.0
}
fn default_range() -> [f64; 2] {
    [CURRENT_RANGE_A.0, CURRENT_RANGE_A.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(default = "default_kp")]
    pub kp: f64,
    #[serde(default = "default_ki")]
    pub ki: f64,
    #[serde(default = "default_cutoff")]
    pub filter_cutoff_hz: f64,
    #[serde(default = "default_true")]
    pub anti_windup: bool,
    /// Passes the reference through the same filter as the measurement, so the
    /// error junction compares equally delayed signals.
    #[serde(default)]
    pub filter_reference: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kp: NOMINAL_KP,
            ki: NOMINAL_KI,
            filter_cutoff_hz: 10.0,
            anti_windup: true,
            filter_reference: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensatorConfig {
    #[serde(default = "default_comp_gain")]
    pub gain: f64,
    /// Internal model; the committed fixture when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<KpModelParams>,
}

impl Default for CompensatorConfig {
    fn default() -> Self {
        Self {
            gain: 2000.0,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    /// Plant hysteresis; the committed fixture when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<KpModelParams>,
    /// Multiplies every plant hysteresis weight (model mismatch seen by the compensator).
    #[serde(default = "default_one")]
    pub weight_scale: f64,
    /// Added to every plant operator shift `delta` (model mismatch), A.
    #[serde(default)]
    pub delta_shift: f64,
    /// [`default_kappa_tilde`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_tilde: Option<f64>,
    #[serde(default = "default_range")]
    pub current_range: [f64; 2],
    #[serde(default)]
    pub disturbance: DisturbanceSpec,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            model: None,
            weight_scale: 1.0,
            delta_shift: 0.0,
            kappa_tilde: None,
            current_range: default_range(),
            disturbance: DisturbanceSpec::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_mode")]
    pub mode: LoopMode,
    pub reference: ReferenceSpec,
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub compensator: CompensatorConfig,
    #[serde(default)]
    pub plant: PlantConfig,
}

impl ScenarioConfig {
    pub fn new(mode: LoopMode, reference: ReferenceSpec, duration_s: f64) -> Self {
        Self {
            mode,
            reference,
            duration_s,
            sample_rate_hz: LOOP_RATE_HZ,
            noise_std: SENSOR_NOISE_STD_M,
            seed: 0,
            controller: ControllerConfig::default(),
            compensator: CompensatorConfig::default(),
            plant: PlantConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reference.validate()?;
        positive(self.duration_s, "duration_s")?;
        positive(self.sample_rate_hz, "sample_rate_hz")?;
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        positive(self.controller.kp, "controller.kp")?;
        positive(self.controller.ki, "controller.ki")?;
        positive(self.controller.filter_cutoff_hz, "controller.filter_cutoff_hz")?;
        positive(self.compensator.gain, "compensator.gain")?;
        positive(self.plant.weight_scale, "plant.weight_scale")?;
        if !self.plant.delta_shift.is_finite() {
            return Err(Error::Config("plant.delta_shift must be finite".into()));
        }
        if let Some(k) = self.plant.kappa_tilde {
            positive(k, "plant.kappa_tilde")?;
        }
        let [lo, hi] = self.plant.current_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("plant.current_range [{lo}, {hi}] is empty")));
        }
        self.plant.disturbance.validate()?;
        for params in [&self.compensator.model, &self.plant.model].into_iter().flatten() {
            KpModel::from_params(params).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }
}

fn build_model(params: Option<&KpModelParams>) -> Result<KpModel> {
    match params {
        Some(p) => KpModel::from_params(p),
        None => KpModel::from_params(&fixture_params()),
    }
}

fn plant_hysteresis(cfg: &PlantConfig) -> Result<KpModel> {
    let mut params = match &cfg.model {
        Some(p) => p.clone(),
        None => fixture_params(),
    };
    for op in &mut params.operator {
        op.rho *= cfg.weight_scale;
        op.delta += cfg.delta_shift;
    }
    KpModel::from_params(&params)
}

/// Channel names of a scenario record, after `time_s`.
pub const SCENARIO_CHANNELS: [&str; 8] = [
    "reference",
    "plant_output",
    "measured_output",
    "filtered_output",
    "u_ff",
    "u_fb",
    "plant_input",
    "error",
];

/// Runs one closed-loop scenario.
///
/// Per sample: read the plant output, add sensor noise, low-pass filter, form the
/// error against the raw reference, step the compensator on the reference and the
/// PI on the error (clamped so that the sum stays in the current range), then
/// step the plant with the summed command.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<TimeSeries> {
    cfg.validate()?;
    let h = 1.0 / cfg.sample_rate_hz;
    let reference = make_reference(&cfg.reference, cfg.duration_s, cfg.sample_rate_hz, cfg.seed)?;
    let r = reference.require("reference")?;
    let n = r.len();

    let g = plant_identified();
    let kappa = cfg.plant.kappa_tilde.unwrap_or_else(default_kappa_tilde);
    let [i_lo, i_hi] = cfg.plant.current_range;
    let mut plant = PlantModel::new(plant_hysteresis(&cfg.plant)?, discretize(&g, h)?, kappa)?
        .with_input_range(i_lo, i_hi)?
        .with_disturbance_bound(cfg.plant.disturbance.bound());
    let mut filter = discretize(&lowpass_filter(cfg.controller.filter_cutoff_hz)?, h)?;
    let mut ref_filter = filter.clone();
    let mut pi = PiController::new(cfg.controller.kp, cfg.controller.ki, h)?.with_limits(
        i_lo,
        i_hi,
        cfg.controller.anti_windup,
    )?;

    let internal = build_model(cfg.compensator.model.as_ref())?;
    // reference displacement -> internal model output, inverting the nominal static gain
    let static_gain = kappa * g.dc_gain();
    let model_offset = internal.bound();
    let mut comp = Compensator::new(internal, cfg.compensator.gain)?.with_limits(i_lo, i_hi)?;
    comp.reset(0.0, i_lo)?;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut dist = DisturbanceSource::new(cfg.plant.disturbance.clone(), cfg.seed, h);

    let mut ch: Vec<Vec<f64>> = (0..SCENARIO_CHANNELS.len()).map(|_| Vec::with_capacity(n)).collect();
    for &rk in r {
        let x = plant.peek_output();
        let meas = if cfg.noise_std > 0.0 {
            x + noise.sample(&mut noise_rng)
        } else {
            x
        };
        let filt = filter.step(meas);
        let r_fb = if cfg.controller.filter_reference {
            ref_filter.step(rk)
        } else {
            rk
        };
        let e = r_fb - filt;

        let u_ff = if cfg.mode.has_feedforward() {
            comp.step(rk / static_gain - model_offset, h)?
        } else {
            0.0
        };
        let u_fb = if cfg.mode.has_feedback() {
            pi.set_limits(i_lo - u_ff, i_hi - u_ff)?;
            pi.step(e)?
        } else {
            0.0
        };
        let i_cmd = u_ff + u_fb;
        plant.step(i_cmd, dist.next())?;

        for (c, v) in ch.iter_mut().zip([rk, x, meas, filt, u_ff, u_fb, i_cmd, e]) {
            c.push(v);
        }
    }

    let mut out = TimeSeries::new(h)?;
    for (name, data) in SCENARIO_CHANNELS.iter().zip(ch) {
        out.insert(*name, data)?;
    }
    out.metadata.insert("mode".into(), cfg.mode.name().into());
    out.metadata.insert("seed".into(), cfg.seed.to_string());
    out.metadata.insert("kappa_tilde".into(), kappa.to_string());
    out.metadata
        .insert("clamped_samples".into(), plant.clamped_samples().to_string());
    Ok(out)
}

/// RMS of `reference - plant_output` from `skip_s` on.
pub fn rms_tracking_error(ts: &TimeSeries, skip_s: f64) -> Result<f64> {
    let r = ts.require("reference")?;
    let y = ts.require("plant_output")?;
    let first = ((skip_s / ts.period()).round() as usize).min(r.len());
    let n = r.len() - first;
    if n == 0 {
        return Err(Error::InvalidParameter("empty evaluation window".into()));
    }
    let ss: f64 = r[first..].iter().zip(&y[first..]).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / n as f64).sqrt())
}

/// Peak-to-peak of `plant_output` over the trailing `fraction` of the record.
pub fn fluctuation_band(ts: &TimeSeries, fraction: f64) -> Result<f64> {
    let y = ts.require("plant_output")?;
    let first = ((1.0 - fraction.clamp(0.0, 1.0)) * y.len() as f64) as usize;
    let tail = &y[first..];
    if tail.is_empty() {
        return Err(Error::InvalidParameter("empty evaluation window".into()));
    }
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    Ok(hi - lo)
}

/// Peak-to-peak of `plant_output` from the first sample at which it reaches the
/// (final) reference value to the end of the record; the whole record when the
/// reference is never reached.
pub fn band_after_reaching_reference(ts: &TimeSeries) -> Result<f64> {
    let r = ts.require("reference")?;
    let y = ts.require("plant_output")?;
    let Some(&target) = r.last() else {
        return Err(Error::InvalidParameter("empty record".into()));
    };
    let rising = target >= y[0];
    let first = y
        .iter()
        .position(|&v| if rising { v >= target } else { v <= target })
        .unwrap_or(0);
    let tail = &y[first..];
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    Ok(hi - lo)
}

/// Mean and standard deviation of `reference - plant_output` over the trailing `fraction`.
pub fn tail_error_stats(ts: &TimeSeries, fraction: f64) -> Result<(f64, f64, usize)> {
    let r = ts.require("reference")?;
    let y = ts.require("plant_output")?;
    let first = ((1.0 - fraction.clamp(0.0, 1.0)) * r.len() as f64) as usize;
    let e: Vec<f64> = r[first..].iter().zip(&y[first..]).map(|(a, b)| a - b).collect();
    let n = e.len();
    if n < 2 {
        return Err(Error::InvalidParameter("empty evaluation window".into()));
    }
    let mean = e.iter().sum::<f64>() / n as f64;
    let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, var.sqrt(), n))
}
