use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmse_core::exec::with_threads;
use mmse_harness::config::ExperimentConfig;
use mmse_harness::montecarlo::run_montecarlo;

fn replications(c: &mut Criterion) {
    let cfg = ExperimentConfig { n: 200, s: 300, r: 16, ..ExperimentConfig::default() };
    let mut g = c.benchmark_group("montecarlo");
    g.sample_size(10);
    // 0 = the default rayon pool; 1 = a single worker.
    for threads in [1usize, 0] {
        g.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| with_threads(t, || black_box(run_montecarlo(&cfg).unwrap().summaries.len())))
        });
    }
    g.finish();
}

criterion_group!(benches, replications);
criterion_main!(benches);
