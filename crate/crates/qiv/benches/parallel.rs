//! Parallel vs sequential throughput for the row-level kernels.
//!
//! The `parallel` feature (default on) routes log-likelihood, score, and
//! influence-function reductions through rayon. These benches compare the
//! rayon tree reduction against the identically shaped sequential
//! reduction on the same data, so a single `cargo bench` run reports the
//! speedup directly; building with `--no-default-features` benches the
//! sequential code path alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qiv::design::build_design;
use qiv::mle::{fit_mle, loglik, loglik_grad, MleConfig};
use qiv::reduce::{pairwise_sum, pairwise_sum_seq};
use qiv::simgen::{apply_misspec, simulate_dataset, Scenario, ScenarioSpec};
use qiv::tr::{fit_nuisances, tr_estimate, TrConfig};

fn bench_reductions(c: &mut Criterion) {
    let spec = ScenarioSpec::new(Scenario::AllCorrect, 50_000, 7, 1).unwrap();
    let data = simulate_dataset(&spec).unwrap();
    let assignment = apply_misspec(Scenario::AllCorrect);
    let model = assignment.model_spec();
    let designs = build_design(&data, &model).unwrap();
    let fit = fit_mle(&data, &model, &MleConfig::default()).unwrap();
    let phi = &fit.phi_hat;

    let mut group = c.benchmark_group("loglik");
    group.bench_function(BenchmarkId::new("n50k", "tree"), |b| {
        b.iter(|| loglik(phi, &data, &designs).unwrap())
    });
    group.finish();

    let mut group = c.benchmark_group("score");
    group.bench_function(BenchmarkId::new("n50k", "tree"), |b| {
        b.iter(|| loglik_grad(phi, &data, &designs).unwrap())
    });
    group.finish();

    // raw reduction kernel: parallel tree vs sequential tree on a
    // cubic-solve-heavy row function
    let gamma = 0.1f64;
    let alpha = 1.2f64;
    let row = |i: usize| -> f64 {
        let gop = (-4.0 + 8.0 * (i as f64) / 50_000.0).exp();
        let g = qiv::gop::GopPoint::new(gamma, alpha, gop).unwrap();
        qiv::gop::solve_p00(&g).unwrap()
    };
    let mut group = c.benchmark_group("cubic_row_sum_n50k");
    group.bench_function("configured", |b| {
        b.iter(|| pairwise_sum(0, 50_000, &row))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| pairwise_sum_seq(0, 50_000, &row))
    });
    group.finish();

    let mut group = c.benchmark_group("tr_pipeline_n20k");
    group.sample_size(10);
    let spec_small = ScenarioSpec::new(Scenario::AllCorrect, 20_000, 11, 1).unwrap();
    let data_small = simulate_dataset(&spec_small).unwrap();
    group.bench_function("fit_and_estimate", |b| {
        b.iter(|| {
            let nf = fit_nuisances(&data_small, &assignment, &TrConfig::default()).unwrap();
            tr_estimate(&data_small, &nf, 0.95).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_reductions);
criterion_main!(benches);
