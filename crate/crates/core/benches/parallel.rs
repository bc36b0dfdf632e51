//! Monte-Carlo cost estimation, sequential loop against the rayon pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use netsteer::harness::RunConfig;
use netsteer::meanfield::{mean_field_cost, monte_carlo_cost};
use netsteer::ExecMode;

fn monte_carlo(c: &mut Criterion) {
    let sys = RunConfig::default().mfa_eval.system.build().expect("default system is valid");
    let s0 = sys.h0.data().to_vec();
    let mut group = c.benchmark_group("monte_carlo_cost");
    group.sample_size(10);
    for rollouts in [1_000, 10_000] {
        for (name, mode) in [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, rollouts), &rollouts, |b, &r| {
                b.iter(|| monte_carlo_cost(&sys, &s0, 20, 1.0, r, 7, mode).expect("valid system"))
            });
        }
    }
    group.finish();
    c.bench_function("mean_field_cost", |b| {
        b.iter(|| mean_field_cost(&sys, &s0, 20, 1.0).expect("valid system"))
    });
}

criterion_group!(benches, monte_carlo);
criterion_main!(benches);
