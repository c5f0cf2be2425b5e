use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ptq_core::drq::{calibrate_drq, fake_drq, DrqConfig};
use ptq_core::io::synth::{generate, SynthKind};
use ptq_core::quant::{fake_quant, make_params};
use ptq_core::rorq::{calibrate_rorq, fake_rorq};
use ptq_core::search::{mse_grid_search, Metric};
use ptq_core::toy_net::{run_seeded, PlanConfig};
use ptq_core::{DrqKind, Scheme, SearchSpace, ThresholdStrategy};

const N: usize = 64 * 64;

fn apply(c: &mut Criterion) {
    let gelu = generate(SynthKind::Gelu, &[64, 64], 0).unwrap();
    let soft = generate(SynthKind::Softmax, &[64, 64], 0).unwrap();
    let outl = generate(SynthKind::Outlier, &[64, 64], 0).unwrap();
    let space = SearchSpace::default();

    let uni = make_params(-4.0, 4.0, 8, Scheme::Symmetric, true).unwrap();
    let drq = calibrate_drq(
        std::slice::from_ref(&soft),
        DrqKind::Softmax,
        8,
        &Metric::Mse,
        &DrqConfig::default(),
    )
    .unwrap()
    .params;
    let rorq = calibrate_rorq(&outl, 8, ThresholdStrategy::Mean3Sd, 3, &space)
        .unwrap()
        .params;

    let mut g = c.benchmark_group("fake_quant");
    g.throughput(Throughput::Elements(N as u64));
    g.bench_function("uniform", |b| {
        b.iter(|| fake_quant(black_box(&gelu), &uni).unwrap())
    });
    g.bench_function("drq_softmax", |b| {
        b.iter(|| fake_drq(black_box(&soft), &drq))
    });
    g.bench_function("rorq", |b| b.iter(|| fake_rorq(black_box(&outl), &rorq)));
    g.finish();
}

fn calibrate(c: &mut Criterion) {
    let outl = generate(SynthKind::Outlier, &[64, 64], 1).unwrap();
    let gelu = generate(SynthKind::Gelu, &[64, 64], 1).unwrap();
    let mut g = c.benchmark_group("calibrate");
    for n in [25, 100] {
        let space = SearchSpace::new(0.01, 1.2, n).unwrap();
        g.bench_with_input(BenchmarkId::new("mse_grid", n), &space, |b, s| {
            b.iter(|| mse_grid_search(black_box(&gelu), 8, Scheme::Symmetric, true, s).unwrap())
        });
    }
    let space = SearchSpace::default();
    g.bench_function("drq_gelu", |b| {
        b.iter(|| {
            calibrate_drq(
                std::slice::from_ref(&gelu),
                DrqKind::Gelu,
                8,
                &Metric::Mse,
                &DrqConfig::default(),
            )
            .unwrap()
        })
    });
    g.bench_function("rorq", |b| {
        b.iter(|| {
            calibrate_rorq(black_box(&outl), 8, ThresholdStrategy::Mean3Sd, 3, &space).unwrap()
        })
    });
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for preset in ["W8A8", "W4A4"] {
        let cfg = PlanConfig::preset(preset).unwrap();
        g.bench_function(preset, |b| b.iter(|| run_seeded(0, &cfg, 8, 0).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, apply, calibrate, pipeline);
criterion_main!(benches);
