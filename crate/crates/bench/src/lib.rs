//! Benchmark fixtures; the benches themselves live in `benches/`.

use hystkit::lti::LOOP_RATE_HZ;
use hystkit::simulate::{make_reference, LoopMode, ReferenceSpec, ScenarioConfig};

/// One period of a 0..5 A, 0.1 Hz triangle at the loop rate (20 000 samples).
pub fn triangle_input() -> Vec<f64> {
    let spec = ReferenceSpec::Triangle {
        amplitude: 2.5,
        frequency_hz: 0.1,
        offset: 2.5,
        phase_cycles: -0.25,
    };
    let ts = make_reference(&spec, 10.0, LOOP_RATE_HZ, 0).expect("valid reference");
    ts.require("reference").expect("reference channel").to_vec()
}

/// The 1 Hz sine closed-loop scenario in `mode`, `duration_s` long.
pub fn sine_scenario(mode: LoopMode, duration_s: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(
        mode,
        ReferenceSpec::Sine {
            amplitude: 150e-6,
            frequency_hz: 1.0,
            offset: 250e-6,
            phase_deg: 0.0,
        },
        duration_s,
    );
    cfg.seed = 7;
    cfg.controller.filter_reference = true;
    cfg.plant.weight_scale = 0.9;
    cfg
}
