//! TOML run configurations, one per subcommand.
//!
//! Every table rejects unknown keys. Relative paths inside a config resolve
//! against the directory of the config file.

use std::path::{Path, PathBuf};

use hystkit::feedback::{NOMINAL_KI, NOMINAL_KP};
use hystkit::hysteresis::{fixture_params, KpModelParams};
use hystkit::lti::{plant_identified, LOOP_RATE_HZ};
use hystkit::simulate::{LoopMode, ReferenceSpec, ScenarioConfig};
use hystkit::{Error, KpModel, Result, ShapeSearch, TransferFunction};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Parses `text` as a config of type `T`; `origin` prefixes diagnostics.
pub fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
}

pub fn to_toml<T: Serialize>(cfg: &T) -> String {
    toml::to_string(cfg).expect("configs serialize to TOML")
}

/// Reads and parses a config file, or returns `T::default()` when `path` is `None`.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            parse(&text, &p.display().to_string())
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

fn rate() -> f64 {
    LOOP_RATE_HZ
}

fn model_from(inline: &Option<KpModelParams>, path: &Option<PathBuf>, base: &Path) -> Result<KpModel> {
    let params = match (inline, path) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either `model_path` or a `[model]` table, not both".into(),
            ))
        }
        (Some(p), None) => {
            p.validate()?;
            p.clone()
        }
        (None, Some(p)) => KpModelParams::load(&resolve(base, p))?,
        (None, None) => fixture_params(),
    };
    KpModel::from_params(&params).map_err(|e| Error::Config(e.to_string()))
}

/// Rational transfer function with input delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfSpec {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    #[serde(default)]
    pub delay: f64,
}

impl TfSpec {
    pub fn build(&self) -> Result<TransferFunction> {
        TransferFunction::new(self.num.clone(), self.den.clone(), self.delay)
            .map_err(|e| Error::Config(format!("plant: {e}")))
    }
}

impl Default for TfSpec {
    fn default() -> Self {
        let g = plant_identified();
        Self {
            num: g.num().to_vec(),
            den: g.den().to_vec(),
            delay: g.delay(),
        }
    }
}

// ---------------------------------------------------------------------------
// hysteresis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HysteresisConfig {
    /// KP parameter file; the committed fixture when neither this nor `[model]` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<KpModelParams>,
    /// Input current waveform, A.
    pub input: ReferenceSpec,
    pub duration_s: f64,
    #[serde(default = "rate")]
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub seed: u64,
    /// Adds the quasi-static displacement channel `stroke_m`.
    #[serde(default)]
    pub stroke: bool,
    /// Scale from hysteresis output to plant input for `stroke_m`; the nominal value when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_tilde: Option<f64>,
}

impl Default for HysteresisConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            model: None,
            input: ReferenceSpec::Triangle {
                amplitude: 2.5,
                frequency_hz: 0.1,
                offset: 2.5,
                phase_cycles: -0.25,
            },
            duration_s: 20.0,
            sample_rate_hz: LOOP_RATE_HZ,
            seed: 0,
            stroke: true,
            kappa_tilde: None,
        }
    }
}

impl HysteresisConfig {
    pub fn model(&self, base: &Path) -> Result<KpModel> {
        model_from(&self.model, &self.model_path, base)
    }
}

// ---------------------------------------------------------------------------
// compensate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensateConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<KpModelParams>,
    #[serde(default = "comp_gain")]
    pub gain: f64,
    /// Desired hysteresis output, model units.
    pub reference: ReferenceSpec,
    pub duration_s: f64,
    #[serde(default = "rate")]
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub y0: f64,
    #[serde(default)]
    pub u0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_limits: Option<[f64; 2]>,
    #[serde(default = "stall_window")]
    pub stall_window_s: f64,
}

fn comp_gain() -> f64 {
    2000.0
}

fn stall_window() -> f64 {
    2.0
}

impl Default for CompensateConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            model: None,
            gain: comp_gain(),
            reference: ReferenceSpec::ModulatedSine {
                frequency_hz: 0.1,
                amplitudes: vec![0.45, 0.3, 0.15, 0.375],
                offset: 0.0,
            },
            duration_s: 40.0,
            sample_rate_hz: LOOP_RATE_HZ,
            seed: 0,
            y0: 0.0,
            u0: 0.0,
            u_limits: None,
            stall_window_s: stall_window(),
        }
    }
}

impl CompensateConfig {
    pub fn model(&self, base: &Path) -> Result<KpModel> {
        model_from(&self.model, &self.model_path, base)
    }
}

// ---------------------------------------------------------------------------
// closedloop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopConfig {
    #[serde(default = "all_modes")]
    pub modes: Vec<LoopMode>,
    /// Leading seconds excluded from the RMS error.
    #[serde(default)]
    pub skip_s: f64,
    /// Shared by every mode; its `mode` key is ignored.
    pub scenario: ScenarioConfig,
}

fn all_modes() -> Vec<LoopMode> {
    LoopMode::ALL.to_vec()
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        let mut scenario = ScenarioConfig::new(
            LoopMode::TwoDof,
            ReferenceSpec::Sine {
                amplitude: 150e-6,
                frequency_hz: 1.0,
                offset: 250e-6,
                phase_deg: 0.0,
            },
            5.0,
        );
        scenario.seed = 7;
        scenario.controller.filter_reference = true;
        scenario.plant.weight_scale = 0.9;
        Self {
            modes: all_modes(),
            skip_s: 1.0,
            scenario,
        }
    }
}

impl ClosedLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("`modes` is empty".into()));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if self.modes[..i].contains(m) {
                return Err(Error::Config(format!("mode `{}` listed twice", m.name())));
            }
        }
        if !(self.skip_s.is_finite() && self.skip_s >= 0.0 && self.skip_s < self.scenario.duration_s) {
            return Err(Error::Config(format!("skip_s {} outside [0, duration_s)", self.skip_s)));
        }
        self.scenario.validate()
    }
}

// ---------------------------------------------------------------------------
// frf

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyGrid {
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub count: usize,
}

/// Where FRF points come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FrfSource {
    /// Steady-state sine responses of `plant` with Gaussian output noise.
    Synthetic {
        #[serde(default)]
        plant: TfSpec,
        frequencies: FrequencyGrid,
        #[serde(default = "unit")]
        amplitude: f64,
        #[serde(default = "periods")]
        periods: f64,
        #[serde(default = "rate")]
        sample_rate_hz: f64,
        #[serde(default)]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Time-domain sine records, one CSV per frequency.
    Records {
        #[serde(default = "input_u")]
        input_channel: String,
        #[serde(default = "output_y")]
        output_channel: String,
        record: Vec<RecordFile>,
    },
    /// Precomputed FRF points in the `frf.csv` layout.
    Points { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordFile {
    pub frequency_hz: f64,
    pub path: PathBuf,
}

fn unit() -> f64 {
    1.0
}
fn periods() -> f64 {
    20.0
}
fn input_u() -> String {
    "u".into()
}
fn output_y() -> String {
    "y".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopGains {
    #[serde(default = "kp")]
    pub kp: f64,
    #[serde(default = "ki")]
    pub ki: f64,
    #[serde(default = "cutoff")]
    pub filter_cutoff_hz: f64,
}

fn kp() -> f64 {
    NOMINAL_KP
}
fn ki() -> f64 {
    NOMINAL_KI
}
fn cutoff() -> f64 {
    10.0
}

impl Default for LoopGains {
    fn default() -> Self {
        Self {
            kp: kp(),
            ki: ki(),
            filter_cutoff_hz: cutoff(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrfConfig {
    pub source: FrfSource,
    /// Margins of the loop closed around the fitted plant; skipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<LoopGains>,
}

impl Default for FrfConfig {
    fn default() -> Self {
        Self {
            source: FrfSource::Synthetic {
                plant: TfSpec::default(),
                frequencies: FrequencyGrid {
                    lo_hz: 1.0,
                    hi_hz: 300.0,
                    count: 30,
                },
                amplitude: 1.0,
                periods: 20.0,
                sample_rate_hz: LOOP_RATE_HZ,
                noise_std: 0.0,
                seed: 0,
            },
            margins: Some(LoopGains::default()),
        }
    }
}

// ---------------------------------------------------------------------------
// fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridOperator {
    pub delta: f64,
    pub w: f64,
    pub m: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightGrid {
    pub operator: Vec<GridOperator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Time-series CSV; the built-in synthetic loop when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default = "current")]
    pub input_channel: String,
    #[serde(default = "output_y")]
    pub output_channel: String,
    /// Leading seconds that only set operator states.
    #[serde(default)]
    pub warmup_s: f64,
    /// Shape search; used when `[weights]` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<ShapeSearch>,
    /// Fixed operator grid; only the weights are fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightGrid>,
}

fn current() -> String {
    "current".into()
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            data: None,
            input_channel: current(),
            output_channel: output_y(),
            warmup_s: 10.0,
            shapes: Some(ShapeSearch::default()),
            weights: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_some() && self.weights.is_some() {
            return Err(Error::Config("give either `[shapes]` or `[weights]`, not both".into()));
        }
        if !(self.warmup_s.is_finite() && self.warmup_s >= 0.0) {
            return Err(Error::Config(format!("warmup_s {} must be >= 0", self.warmup_s)));
        }
        Ok(())
    }

    pub fn data_path(&self, base: &Path) -> Option<PathBuf> {
        self.data.as_ref().map(|p| resolve(base, p))
    }
}

pub fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    resolve(base, p)
}

// ---------------------------------------------------------------------------
// margins

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodeGrid {
    pub lo_rad_s: f64,
    pub hi_rad_s: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginsConfig {
    #[serde(default)]
    pub gains: LoopGains,
    #[serde(default)]
    pub plant: TfSpec,
    #[serde(default = "bode_grid")]
    pub bode: BodeGrid,
}

fn bode_grid() -> BodeGrid {
    BodeGrid {
        lo_rad_s: 1.0,
        hi_rad_s: 1e4,
        points: 400,
    }
}

impl Default for MarginsConfig {
    fn default() -> Self {
        Self {
            gains: LoopGains::default(),
            plant: TfSpec::default(),
            bode: bode_grid(),
        }
    }
}
