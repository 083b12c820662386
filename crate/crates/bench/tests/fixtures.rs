use hystkit::simulate::LoopMode;
use hystkit_bench::{sine_scenario, triangle_input};

#[test]
fn triangle_spans_the_current_range() {
    let u = triangle_input();
    assert_eq!(u.len(), 20_000);
    assert_eq!(u[0], 0.0);
    let max = u.iter().fold(0.0f64, |m, &v| m.max(v));
    assert!((max - 5.0).abs() < 1e-12);
}

#[test]
fn scenario_fixture_is_valid() {
    for mode in LoopMode::ALL {
        let cfg = sine_scenario(mode, 0.5);
        cfg.validate().unwrap();
        assert_eq!(cfg.mode, mode);
    }
}
