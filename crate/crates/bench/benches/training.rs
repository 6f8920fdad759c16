use criterion::{criterion_group, criterion_main, Criterion};
use ssgan_bench::{shapes_dataset, trainer};
use ssgan_core::training::Algorithm;

fn bench_steps(c: &mut Criterion) {
    let ds = shapes_dataset();
    let mut g = c.benchmark_group("step_16px_m32");
    g.sample_size(20);
    for alg in [Algorithm::Ssgan, Algorithm::Supervised] {
        let mut t = trainer(&ds, vec![32, 64], 32);
        t.experiment.training.algorithm = alg;
        g.bench_function(alg.to_string(), |b| b.iter(|| t.step(&ds).unwrap()));
    }
    g.finish();
}

fn bench_eval(c: &mut Criterion) {
    let ds = shapes_dataset();
    let t = trainer(&ds, vec![32, 64], 32);
    c.bench_function("evaluate_128_test_images", |b| b.iter(|| t.evaluate(&ds).unwrap()));
}

criterion_group!(benches, bench_steps, bench_eval);
criterion_main!(benches);
