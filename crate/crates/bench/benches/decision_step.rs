use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossroads_bench::single_step;
use crossroads_core::sim::{run_with, RunOptions};

fn decision_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("decision_step");
    for name in ["case1_A", "case2", "case3"] {
        let cfg = single_step(name);
        for gating in [true, false] {
            let opts = RunOptions {
                risk_gating: gating,
                ..RunOptions::new(cfg.mode)
            };
            let id = BenchmarkId::new(name, if gating { "gated" } else { "ungated" });
            group.bench_function(id, |b| b.iter(|| run_with(&cfg, &opts).unwrap()));
        }
    }
    group.finish();
}

criterion_group!(benches, decision_step);
criterion_main!(benches);
