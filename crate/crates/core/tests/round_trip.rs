use hystkit::ident::{estimate_frf, read_frf_csv, synthetic_frf_dataset, write_frf_csv};
use hystkit::lti::{logspace, plant_identified};
use hystkit::simulate::{run_scenario, LoopMode, ReferenceSpec, ScenarioConfig, SCENARIO_CHANNELS};
use hystkit::TimeSeries;
use proptest::prelude::*;

fn rel_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 5e-12 * a.abs().max(b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn csv_keeps_twelve_significant_digits(
        data in prop::collection::vec(prop_oneof![-1e6f64..1e6, -1e-9f64..1e-9, Just(0.0)], 2..64),
        period in 1e-4f64..1.0,
    ) {
        let ts = TimeSeries::new(period).unwrap().with("x", data.clone()).unwrap();
        let back = TimeSeries::read_csv(ts.to_csv_string().as_bytes()).unwrap();
        prop_assert!(rel_close(back.period(), period));
        for (a, b) in data.iter().zip(back.require("x").unwrap()) {
            prop_assert!(rel_close(*a, *b), "{} vs {}", a, b);
        }
    }
}

#[test]
fn scenario_record_survives_csv() {
    let cfg = ScenarioConfig::new(
        LoopMode::TwoDof,
        ReferenceSpec::Step {
            height: 200e-6,
            start_s: 0.1,
            initial: 0.0,
        },
        0.5,
    );
    let ts = run_scenario(&cfg).unwrap();
    let back = TimeSeries::read_csv(ts.to_csv_string().as_bytes()).unwrap();
    assert_eq!(back.len(), ts.len());
    for name in SCENARIO_CHANNELS {
        for (a, b) in ts.require(name).unwrap().iter().zip(back.require(name).unwrap()) {
            assert!(rel_close(*a, *b), "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn frf_points_survive_csv() {
    let g = plant_identified();
    let records = synthetic_frf_dataset(&g, &logspace(1.0, 300.0, 12), 1.0, 4.0, 2000.0, 1e-7, 5).unwrap();
    let points = estimate_frf(&records).unwrap();
    let mut buf = Vec::new();
    write_frf_csv(&points, &mut buf).unwrap();
    let back = read_frf_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), points.len());
    for (a, b) in points.iter().zip(&back) {
        assert!(rel_close(a.frequency_hz, b.frequency_hz));
        assert!((a.response - b.response).norm() <= 5e-12 * a.response.norm());
    }
}
