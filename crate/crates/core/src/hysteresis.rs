//! Krasnoselskii-Pokrovskii hysteresis in its play-with-saturation form.
//!
//! An elementary operator shifts its input by `delta`, runs it through a play
//! (backlash) of full slot width `w`, clamps the play state to `[-m, m]` and
//! scales by the slope gain `gamma`. A [`KpModel`] is a positively weighted
//! sum of such operators.

use serde::{Deserialize, Serialize};

use crate::error::{finite, Error, Result};

/// One elementary KP operator together with its memory.
#[derive(Debug, Clone, PartialEq)]
pub struct KpOperator {
    delta: f64,
    w: f64,
    m: f64,
    gamma: f64,
    p: f64,
    last_input: Option<f64>,
    ascending: bool,
}

impl KpOperator {
    pub fn new(delta: f64, w: f64, m: f64, gamma: f64) -> Result<Self> {
        finite(delta, "delta")?;
        finite(w, "w")?;
        finite(m, "m")?;
        finite(gamma, "gamma")?;
        if w < 0.0 {
            return Err(Error::InvalidParameter(format!("slot width w = {w} < 0")));
        }
        if m <= 0.0 {
            return Err(Error::InvalidParameter(format!("saturation m = {m} <= 0")));
        }
        if gamma <= 0.0 {
            return Err(Error::InvalidParameter(format!("slope gain gamma = {gamma} <= 0")));
        }
        Ok(Self {
            delta,
            w,
            m,
            gamma,
            p: 0.0,
            last_input: None,
            ascending: true,
        })
    }

    /// Builds an operator from its output zero-crossing inputs `alpha >= beta`.
    pub fn from_zero_crossings(alpha: f64, beta: f64, m: f64, gamma: f64) -> Result<Self> {
        let (delta, w) = zero_crossing_to_play(alpha, beta)?;
        Self::new(delta, w, m, gamma)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn width(&self) -> f64 {
        self.w
    }

    pub fn saturation(&self) -> f64 {
        self.m
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Play state before the slope gain, always inside `[-m, m]`.
    pub fn state(&self) -> f64 {
        self.p
    }

    pub fn output(&self) -> f64 {
        self.gamma * self.p
    }

    /// `(alpha, beta)`: the inputs at which the ascending and descending branches cross zero.
    pub fn zero_crossings(&self) -> (f64, f64) {
        play_to_zero_crossing(self.delta, self.w)
    }

    /// Sets the memory so that the operator currently outputs `y0` (clamped to saturation).
    pub fn reset(&mut self, y0: f64) -> Result<()> {
        finite(y0, "initial output")?;
        self.p = (y0 / self.gamma).clamp(-self.m, self.m);
        self.last_input = None;
        self.ascending = true;
        Ok(())
    }

    pub fn apply(&mut self, u: f64) -> Result<f64> {
        finite(u, "operator input")?;
        let v = u + self.delta;
        let r = 0.5 * self.w;
        self.p = (v - r).max((v + r).min(self.p)).clamp(-self.m, self.m);
        if let Some(last) = self.last_input {
            if u > last {
                self.ascending = true;
            } else if u < last {
                self.ascending = false;
            }
        }
        self.last_input = Some(u);
        Ok(self.gamma * self.p)
    }

    /// Whether a further input move in the current direction moves the output.
    pub fn on_slope(&self, u: f64) -> bool {
        let v = u + self.delta;
        let r = 0.5 * self.w;
        if self.ascending {
            self.p == v - r && self.p < self.m
        } else {
            self.p == v + r && self.p > -self.m
        }
    }

    pub fn is_ascending(&self) -> bool {
        self.ascending
    }
}

/// `(alpha, beta) -> (delta, w)` with `delta = -(alpha + beta) / 2` and `w = alpha - beta`.
pub fn zero_crossing_to_play(alpha: f64, beta: f64) -> Result<(f64, f64)> {
    finite(alpha, "alpha")?;
    finite(beta, "beta")?;
    if alpha < beta {
        return Err(Error::InvalidParameter(format!(
            "zero crossings need alpha >= beta, got alpha = {alpha}, beta = {beta}"
        )));
    }
    Ok((-0.5 * (alpha + beta), alpha - beta))
}

/// `(delta, w) -> (alpha, beta)` with `alpha = -delta + w/2`, `beta = -delta - w/2`.
pub fn play_to_zero_crossing(delta: f64, w: f64) -> (f64, f64) {
    (-delta + 0.5 * w, -delta - 0.5 * w)
}

/// Instantaneous linearization `y = gain * u + bias` of a model at its current state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentInfo {
    pub gain: f64,
    pub bias: f64,
}

/// Weighted finite superposition of KP operators.
#[derive(Debug, Clone, PartialEq)]
pub struct KpModel {
    operators: Vec<KpOperator>,
    weights: Vec<f64>,
    output: f64,
}

impl KpModel {
    pub fn new(operators: Vec<KpOperator>, weights: Vec<f64>) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::InvalidParameter("a KP model needs at least one operator".into()));
        }
        if operators.len() != weights.len() {
            return Err(Error::InvalidParameter(format!(
                "{} operators but {} weights",
                operators.len(),
                weights.len()
            )));
        }
        if let Some((i, rho)) = weights
            .iter()
            .enumerate()
            .find(|(_, &rho)| !(rho.is_finite() && rho > 0.0))
        {
            return Err(Error::InvalidParameter(format!("weight {i} = {rho} is not > 0")));
        }
        let mut model = Self {
            operators,
            weights,
            output: 0.0,
        };
        model.output = model.sum();
        Ok(model)
    }

    pub fn from_params(params: &KpModelParams) -> Result<Self> {
        params.validate()?;
        let mut ops = Vec::with_capacity(params.operator.len());
        let mut weights = Vec::with_capacity(params.operator.len());
        for op in &params.operator {
            let mut kp = KpOperator::new(op.delta, op.w, op.m, op.gamma)?;
            kp.reset(op.y0)?;
            ops.push(kp);
            weights.push(op.rho);
        }
        Self::new(ops, weights)
    }

    /// Parameters describing the shapes and weights; `y0` reflects the current state.
    pub fn params(&self) -> KpModelParams {
        let operator = self
            .operators
            .iter()
            .zip(&self.weights)
            .map(|(op, &rho)| KpOperatorParams {
                delta: op.delta,
                w: op.w,
                m: op.m,
                gamma: op.gamma,
                rho,
                y0: op.output(),
            })
            .collect::<Vec<_>>();
        KpModelParams {
            n: operator.len(),
            operator,
        }
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn operators(&self) -> &[KpOperator] {
        &self.operators
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn output(&self) -> f64 {
        self.output
    }

    /// `sum(rho * gamma * m)`: the model output never leaves `[-bound, bound]`.
    pub fn bound(&self) -> f64 {
        self.operators
            .iter()
            .zip(&self.weights)
            .map(|(op, rho)| rho * op.gamma * op.m)
            .sum()
    }

    /// Largest possible instantaneous slope, `sum(rho * gamma)`.
    pub fn max_gain(&self) -> f64 {
        self.operators
            .iter()
            .zip(&self.weights)
            .map(|(op, rho)| rho * op.gamma)
            .sum()
    }

    fn sum(&self) -> f64 {
        self.operators
            .iter()
            .zip(&self.weights)
            .map(|(op, rho)| rho * op.output())
            .sum()
    }

    pub fn apply(&mut self, u: f64) -> Result<f64> {
        finite(u, "model input")?;
        let mut y = 0.0;
        for (op, rho) in self.operators.iter_mut().zip(&self.weights) {
            y += rho * op.apply(u)?;
        }
        self.output = y;
        Ok(y)
    }

    /// Resets every operator to the virgin state `y0 = 0`.
    pub fn reset(&mut self) {
        for op in &mut self.operators {
            op.p = 0.0;
            op.last_input = None;
            op.ascending = true;
        }
        self.output = 0.0;
    }

    /// Resets operator `n` to output `y0[n]` (pre-weight).
    pub fn reset_to(&mut self, y0: &[f64]) -> Result<()> {
        if y0.len() != self.operators.len() {
            return Err(Error::InvalidParameter(format!(
                "{} initial outputs for {} operators",
                y0.len(),
                self.operators.len()
            )));
        }
        for (op, &y) in self.operators.iter_mut().zip(y0) {
            op.reset(y)?;
        }
        self.output = self.sum();
        Ok(())
    }

    /// Resets every operator proportionally so that the model outputs `y0`, clamped to
    /// `[-bound, bound]`: operator `n` gets `p_n = m_n * y0 / bound`.
    pub fn reset_output(&mut self, y0: f64) -> Result<()> {
        finite(y0, "initial output")?;
        let bound = self.bound();
        let frac = (y0 / bound).clamp(-1.0, 1.0);
        for op in &mut self.operators {
            op.p = frac * op.m;
            op.last_input = None;
            op.ascending = true;
        }
        self.output = self.sum();
        Ok(())
    }

    /// Linearization at the last applied input `u`, for a continuation in the last
    /// movement direction (ascending before any movement).
    pub fn tangent(&self, u: f64) -> TangentInfo {
        let gain: f64 = self
            .operators
            .iter()
            .zip(&self.weights)
            .filter(|(op, _)| op.on_slope(u))
            .map(|(op, rho)| rho * op.gamma)
            .sum();
        TangentInfo {
            gain,
            bias: self.output - gain * u,
        }
    }

    /// Copy with every weight multiplied by `scale`.
    pub fn with_scaled_weights(&self, scale: f64) -> Result<Self> {
        let weights = self.weights.iter().map(|w| w * scale).collect();
        Self::new(self.operators.clone(), weights)
    }
}

/// One `[[operator]]` entry of a KP parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpOperatorParams {
    pub delta: f64,
    pub w: f64,
    pub m: f64,
    pub gamma: f64,
    pub rho: f64,
    #[serde(default)]
    pub y0: f64,
}

/// KP parameter file:
///
/// ```toml
/// n = 1
/// [[operator]]
/// delta = -2.4
/// w = 1.2
/// m = 0.72
/// gamma = 1.0
/// rho = 0.7
/// y0 = 0.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpModelParams {
    pub n: usize,
    pub operator: Vec<KpOperatorParams>,
}

impl KpModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n != self.operator.len() {
            return Err(Error::Config(format!(
                "n = {} but {} [[operator]] entries",
                self.n,
                self.operator.len()
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let params: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("KP parameters always serialize")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// The committed three-operator fixture (synthetic MSM-like loop, 0..5 A input,
/// output span about one unit).
pub fn fixture_params() -> KpModelParams {
    KpModelParams::from_toml(include_str!("../fixtures/kp_n3.toml")).expect("bundled fixture parses")
}

pub fn fixture_model() -> KpModel {
    KpModel::from_params(&fixture_params()).expect("bundled fixture is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(delta: f64, w: f64, m: f64, gamma: f64) -> KpOperator {
        KpOperator::new(delta, w, m, gamma).unwrap()
    }

    #[test]
    fn saturated_unity_slope_when_slot_closed() {
        let mut o = op(0.0, 0.0, 1.0, 1.0);
        assert_eq!(o.apply(0.5).unwrap(), 0.5);
        let mut o = op(0.0, 0.0, 1.0, 1.0);
        assert_eq!(o.apply(2.0).unwrap(), 1.0);
    }

    #[test]
    fn play_holds_inside_slot() {
        let mut o = op(0.0, 1.0, 1.0, 1.0);
        let ys: Vec<f64> = [0.0, 1.0, 0.75].iter().map(|&u| o.apply(u).unwrap()).collect();
        assert_eq!(ys, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn reset_examples() {
        let mut o = op(0.0, 1.0, 1.0, 2.0);
        o.reset(0.0).unwrap();
        assert_eq!(o.state(), 0.0);
        assert_eq!(o.apply(0.0).unwrap(), 0.0);

        let mut o = op(0.0, 0.0, 0.72, 1.0);
        o.reset(5.0).unwrap();
        assert_eq!(o.state(), 0.72);

        let mut o = op(0.0, 0.0, 1.0, 2.0);
        o.reset(1.0).unwrap();
        assert_eq!(o.state(), 0.5);
        assert_eq!(o.output(), 1.0);

        assert!(matches!(o.reset(f64::NAN), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_bad_shapes_and_inputs() {
        assert!(KpOperator::new(0.0, -0.1, 1.0, 1.0).is_err());
        assert!(KpOperator::new(0.0, 0.1, 0.0, 1.0).is_err());
        assert!(KpOperator::new(0.0, 0.1, 1.0, 0.0).is_err());
        let mut o = op(0.0, 0.0, 1.0, 1.0);
        assert!(o.apply(f64::INFINITY).is_err());
        assert!(KpModel::new(vec![], vec![]).is_err());
        assert!(KpModel::new(vec![op(0.0, 0.0, 1.0, 1.0)], vec![0.0]).is_err());
        assert!(KpModel::new(vec![op(0.0, 0.0, 1.0, 1.0)], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_crossing_transform() {
        assert_eq!(zero_crossing_to_play(1.0, -1.0).unwrap(), (0.0, 2.0));
        assert_eq!(zero_crossing_to_play(0.3, 0.3).unwrap(), (-0.3, 0.0));
        let (d, w) = zero_crossing_to_play(0.5, -1.5).unwrap();
        assert_eq!((d, w), (0.5, 2.0));
        assert_eq!(play_to_zero_crossing(d, w), (0.5, -1.5));
        assert!(zero_crossing_to_play(-1.0, 1.0).is_err());
    }

    #[test]
    fn single_operator_model_matches_operator() {
        let mut o = op(0.0, 1.0, 1.0, 1.0);
        let mut model = KpModel::new(vec![o.clone()], vec![1.0]).unwrap();
        for u in [0.0, 1.0, 0.75, -0.4, 2.0] {
            assert_eq!(model.apply(u).unwrap(), o.apply(u).unwrap());
        }
    }

    #[test]
    fn weighted_sum() {
        let mut model = KpModel::new(vec![op(0.0, 0.0, 1.0, 1.0), op(0.0, 0.0, 1.0, 1.0)], vec![2.0, 3.0]).unwrap();
        let y = model.apply(0.1).unwrap();
        assert!((y - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tangent_regimes() {
        let mut model = KpModel::new(vec![op(0.0, 2.0, 1.0, 1.0)], vec![1.0]).unwrap();
        model.apply(0.5).unwrap();
        let t = model.tangent(0.5);
        assert_eq!(t.gain, 0.0);
        assert_eq!(t.bias, model.output());

        let mut model = KpModel::new(vec![op(0.0, 0.0, 1.0, 1.0)], vec![1.0]).unwrap();
        model.apply(0.1).unwrap();
        model.apply(0.2).unwrap();
        assert_eq!(model.tangent(0.2).gain, 1.0);
        // saturated: no slope upward
        model.apply(3.0).unwrap();
        assert_eq!(model.tangent(3.0).gain, 0.0);
        // reversal from saturation goes straight onto the descending edge
        model.apply(0.9).unwrap();
        assert_eq!(model.tangent(0.9).gain, 1.0);
    }

    #[test]
    fn tangent_sums_active_operators() {
        // three operators with distinct rho*gamma; widths chosen so that after
        // rising to u = 1 the first two sit on their ascending edge, the third in its slot
        let mut model = KpModel::new(
            vec![op(0.0, 0.0, 5.0, 0.5), op(0.0, 1.0, 5.0, 2.0), op(0.0, 4.0, 5.0, 1.0)],
            vec![1.0, 0.25, 3.0],
        )
        .unwrap();
        for u in [0.0, 0.5, 1.0] {
            model.apply(u).unwrap();
        }
        // operator regimes by hand: p1 = 1 = v, p2 = 0.5 = v - 0.5, p3 = 0 inside [-1, 3]
        assert!(model.operators()[0].on_slope(1.0));
        assert!(model.operators()[1].on_slope(1.0));
        assert!(!model.operators()[2].on_slope(1.0));
        let t = model.tangent(1.0);
        assert_eq!(t.gain, 1.0 * 0.5 + 0.25 * 2.0);
        assert!((t.gain * 1.0 + t.bias - model.output()).abs() < 1e-15);
    }

    #[test]
    fn params_round_trip() {
        let params = fixture_params();
        assert_eq!(params.n, 3);
        let text = params.to_toml();
        assert_eq!(KpModelParams::from_toml(&text).unwrap(), params);
        assert!(KpModelParams::from_toml("n = 2\n[[operator]]\ndelta=0\nw=0\nm=1\ngamma=1\nrho=1\n").is_err());
        assert!(KpModelParams::from_toml("n = 1\n[[operator]]\ndelta=0\nw=0\nm=1\ngamma=1\nrho=1\nbogus=1\n").is_err());
    }
}
