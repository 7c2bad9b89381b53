use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfcrowd_bench::Fixture;
use mfcrowd_core::particles::{stream_particles, EmpiricalCost, ParticleSetup};
use mfcrowd_core::risk::CostInputs;
use mfcrowd_core::{crowding_term, pooled_risk, solve_adjoint, solve_forward, wasserstein2_circle};
use std::hint::black_box;

const HORIZON: f64 = 0.05;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for n_x in [64, 128] {
        let f = Fixture::new(n_x, HORIZON);
        group.bench_with_input(BenchmarkId::from_parameter(n_x), &f, |b, f| {
            b.iter(|| solve_forward(black_box(&f.crowd.m0), &f.control, &f.dynamics, &f.grid, &f.time).unwrap())
        });
    }
    group.finish();
}

fn adjoint(c: &mut Criterion) {
    let mut group = c.benchmark_group("adjoint");
    for n_x in [64, 128] {
        let f = Fixture::new(n_x, HORIZON);
        let controls = [f.control.clone()];
        let densities = [f.density.clone()];
        group.bench_with_input(BenchmarkId::from_parameter(n_x), &f, |b, f| {
            b.iter(|| solve_adjoint(black_box(&controls), &densities, f.adjoint_inputs(500.0)).unwrap())
        });
    }
    group.finish();
}

fn risk(c: &mut Criterion) {
    let f = Fixture::new(128, HORIZON);
    let controls = [f.control.clone()];
    let densities = [f.density.clone()];
    c.bench_function("pooled_risk/128", |b| {
        b.iter(|| {
            let inputs = CostInputs {
                psi: &f.psi,
                kernel: &f.kernel,
                aversion_weight: 500.0,
                grid: &f.grid,
                time: &f.time,
            };
            pooled_risk(black_box(&controls), &densities, &f.lambda_bar, inputs).unwrap()
        })
    });
}

fn convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("crowding_term");
    for n_x in [128, 512] {
        let f = Fixture::new(n_x, 0.001);
        group.bench_with_input(BenchmarkId::from_parameter(n_x), &f, |b, f| {
            b.iter(|| crowding_term(&f.kernel, black_box(&f.crowd.m0), &f.grid).unwrap())
        });
    }
    group.finish();
}

fn particles(c: &mut Criterion) {
    let f = Fixture::new(128, 0.01);
    let setup = ParticleSetup {
        control: &f.control,
        m0: &f.crowd.m0,
        dynamics: &f.dynamics,
        grid: &f.grid,
        time: &f.time,
    };
    let cost = EmpiricalCost {
        control: &f.control,
        kernel: &f.kernel,
        aversion_weight: 500.0,
        psi: &f.crowd.psi,
        grid: &f.grid,
        time: &f.time,
    };
    let mut group = c.benchmark_group("particles");
    group.sample_size(10);
    for n in [100, 400] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| stream_particles(n, setup, cost, black_box(1), &[]).unwrap())
        });
    }
    group.finish();
    let xs: Vec<f64> = (0..1600).map(|i| (i as f64 * 0.618_033_988_7).fract()).collect();
    let ys: Vec<f64> = (0..1600).map(|i| (i as f64 * 0.414_213_562_3).fract()).collect();
    c.bench_function("wasserstein2_circle/1600", |b| {
        b.iter(|| wasserstein2_circle(black_box(&xs), &ys, 1.0).unwrap())
    });
}

criterion_group!(benches, forward, adjoint, risk, convolution, particles);
criterion_main!(benches);
