//! Parallel-versus-sequential benchmarks for the two data-parallel hot
//! paths: running independent chains and drawing posterior predictions.
//! Build with the default `parallel` feature; the sequential baselines go
//! through the always-compiled sequential code path (chains) or a
//! single-thread pool (prediction draws).

use criterion::{criterion_group, criterion_main, Criterion};

use geolatent::model::{validate_dataset, Constraints, PriorConfig};
use geolatent::posterior::{predict_h, NewSites};
use geolatent::sampler::{run_chains, run_chains_sequential, FitConfig, FitProblem};
use geolatent::simulation::{simulate_dataset, SimConfig};

fn setup(n: usize, m: usize) -> (FitProblem, NewSites) {
    let cfg = SimConfig {
        n_fit: n,
        m_pred: m,
        seed: 7,
        ..SimConfig::default()
    };
    let sim = simulate_dataset(&cfg).unwrap();
    let (data, _) = validate_dataset(sim.fit.clone(), &sim.metrics).unwrap();
    let constraints = Constraints::default_for(&sim.metrics).unwrap();
    let prob = FitProblem::new(data, sim.metrics.clone(), PriorConfig::default(), constraints)
        .unwrap();
    let mut x = sim.holdout.x.clone();
    prob.data.standardization.as_ref().unwrap().apply(&mut x);
    let new = NewSites {
        site_ids: sim.holdout.site_ids.clone(),
        coords: sim.holdout.coords.clone(),
        x,
    };
    (prob, new)
}

fn bench_chains(c: &mut Criterion) {
    let (prob, _) = setup(60, 10);
    let fc = FitConfig {
        chains: 2,
        iterations: 400,
        burnin: 100,
        thin_z: 10,
        seed: 3,
    };
    let mut group = c.benchmark_group("chains");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| run_chains(&prob, &fc).unwrap());
    });
    group.bench_function("sequential", |b| {
        b.iter(|| run_chains_sequential(&prob, &fc).unwrap());
    });
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let (prob, new) = setup(60, 40);
    let fc = FitConfig {
        chains: 2,
        iterations: 600,
        burnin: 100,
        thin_z: 10,
        seed: 3,
    };
    let traces = run_chains(&prob, &fc).unwrap();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| predict_h(&traces, &prob, &new, 1, 5).unwrap());
    });
    group.bench_function("single_thread", |b| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        b.iter(|| pool.install(|| predict_h(&traces, &prob, &new, 1, 5).unwrap()));
    });
    group.finish();
}

criterion_group!(benches, bench_chains, bench_predict);
criterion_main!(benches);
