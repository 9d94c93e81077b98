// Single-thread pool against the global rayon pool on the hot loops:
// a Laplace evaluation, importance weights and the PRC Monte Carlo.
// Build with `--no-default-features` to time the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fpglmm::bayes::{build_proposal, importance_resample};
use fpglmm::em::{fit, EmControls};
use fpglmm::likelihood::laplace_loglik;
use fpglmm::prc::{prc_unconditional, PrcQuery};
use fpglmm::simgen::{simulate_dataset, Preset};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let global = rayon::current_num_threads();
    let mut out = vec![("1-thread".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if global > 1 {
        out.push((format!("{global}-threads"), rayon::ThreadPoolBuilder::new().num_threads(global).build().unwrap()));
    }
    out
}

fn throughput(c: &mut Criterion) {
    let cfg = Preset::Db1Categorical.config(40, 4, 1);
    let data = simulate_dataset(&cfg).unwrap().data;
    let fitted = fit(&data, None, &EmControls::default()).unwrap();
    let proposal = build_proposal(&fitted).unwrap();
    let query = PrcQuery { w: 12, m1: 38, m2: 38, q1: 3.0, q2: 3.0 };

    let mut group = c.benchmark_group("throughput");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("laplace", &name), &pool, |b, pool| {
            b.iter(|| pool.install(|| laplace_loglik(black_box(&cfg.tau_true), &data).unwrap().total))
        });
        group.bench_with_input(BenchmarkId::new("importance_h200", &name), &pool, |b, pool| {
            b.iter(|| pool.install(|| importance_resample(&data, &proposal, 200, 50, 7).unwrap().ess))
        });
        group.bench_with_input(BenchmarkId::new("prc_mc_1e5", &name), &pool, |b, pool| {
            b.iter(|| pool.install(|| prc_unconditional(black_box(&query), &cfg.tau_true, &cfg.scheme, 100_000, 3).unwrap().value))
        });
    }
    group.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);
