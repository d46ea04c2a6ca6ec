//! Monte Carlo throughput on one thread against the full pool. Built without
//! the `parallel` feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stagger_core::imputation::PipelineOptions;
use stagger_core::simlab::{monte_carlo, DgpConfig, EstimatorSpec, McOptions};

fn bench_mc(c: &mut Criterion) {
    let specs = [
        EstimatorSpec::Imputation { scheme: "all_post".into(), pipeline: PipelineOptions::default() },
        EstimatorSpec::Twfe { country_year: false },
    ];
    let cfg = DgpConfig::default();
    let mut group = c.benchmark_group("montecarlo_16_reps");
    group.sample_size(10);
    for (label, threads) in [("sequential", Some(1)), ("parallel", None)] {
        let opts = McOptions { reps: 16, chunk: 16, threads, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(label), &opts, |b, opts| {
            b.iter(|| monte_carlo(&specs, &cfg, opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_mc);
criterion_main!(benches);
