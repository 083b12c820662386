use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use hystkit::compensator::Compensator;
use hystkit::feedback::{open_loop, stability_margins, NOMINAL_KI, NOMINAL_KP};
use hystkit::hysteresis::fixture_model;
use hystkit::ident::{estimate_frf, fit_sos_delay, synthetic_frf_dataset};
use hystkit::lti::{discretize, logspace, lowpass_filter, plant_identified};
use hystkit::simulate::{run_scenario, LoopMode};
use hystkit_bench::{sine_scenario, triangle_input};
use std::hint::black_box;

const H: f64 = 1.0 / 2000.0;

fn hysteresis(c: &mut Criterion) {
    let input = triangle_input();
    let mut g = c.benchmark_group("kp_model");
    g.throughput(Throughput::Elements(input.len() as u64));
    g.bench_function("apply_triangle", |b| {
        b.iter_batched_ref(
            fixture_model,
            |m| {
                for &u in &input {
                    black_box(m.apply(u).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn compensator(c: &mut Criterion) {
    let reference: Vec<f64> = triangle_input().iter().map(|u| 0.09 * (u - 2.5)).collect();
    let mut g = c.benchmark_group("compensator");
    g.throughput(Throughput::Elements(reference.len() as u64));
    g.bench_function("step_triangle", |b| {
        b.iter_batched_ref(
            || Compensator::new(fixture_model(), 2000.0).unwrap(),
            |comp| {
                for &r in &reference {
                    black_box(comp.step(r, H).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn scenario(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario");
    g.sample_size(10);
    for mode in LoopMode::ALL {
        let cfg = sine_scenario(mode, 1.0);
        g.bench_function(mode.name(), |b| b.iter(|| black_box(run_scenario(&cfg).unwrap())));
    }
    g.finish();
}

fn linear(c: &mut Criterion) {
    let g_tf = plant_identified();
    let f = lowpass_filter(10.0).unwrap();
    c.bench_function("discretize_plant", |b| {
        b.iter(|| black_box(discretize(&g_tf, H).unwrap()))
    });
    let l = open_loop(NOMINAL_KP, NOMINAL_KI, &g_tf, &f).unwrap();
    c.bench_function("stability_margins", |b| {
        b.iter(|| black_box(stability_margins(&l).unwrap()))
    });
}

fn identification(c: &mut Criterion) {
    let g_tf = plant_identified();
    let records = synthetic_frf_dataset(&g_tf, &logspace(1.0, 300.0, 30), 1.0, 4.0, 2000.0, 0.0, 0).unwrap();
    let points = estimate_frf(&records).unwrap();
    let mut g = c.benchmark_group("ident");
    g.sample_size(20);
    g.bench_function("estimate_frf_30", |b| {
        b.iter(|| black_box(estimate_frf(&records).unwrap()))
    });
    g.bench_function("fit_sos_delay_30", |b| {
        b.iter(|| black_box(fit_sos_delay(&points).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, hysteresis, compensator, scenario, linear, identification);
criterion_main!(benches);
