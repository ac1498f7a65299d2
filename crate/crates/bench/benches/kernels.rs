use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use uidlm::diffmath::Graph;
use uidlm::objective::{local_consistency_reg, loss_graph, max_reg, variance_reg, ObjectiveConfig, RegularizerKind};
use uidlm::stats::{paired_permutation_test, Resampling};
use uidlm_bench::{batch, model, paired, random_tensor, sequences, surprisals};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = random_tensor(n, n, 1);
        let b = random_tensor(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn regularizers(c: &mut Criterion) {
    let u = surprisals(512, 3);
    c.bench_function("variance_reg/512", |b| b.iter(|| variance_reg(black_box(&u))));
    c.bench_function("local_consistency_reg/512", |b| b.iter(|| local_consistency_reg(black_box(&u))));
    c.bench_function("max_reg/512", |b| b.iter(|| max_reg(black_box(&u))));
}

fn training_step(c: &mut Criterion) {
    let m = model(1000);
    let seqs = sequences(1000, 8, 31, 4);
    let bt = batch(&seqs);
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for (name, cfg) in [
        ("baseline", ObjectiveConfig::baseline()),
        ("variance", ObjectiveConfig::regularized(RegularizerKind::Variance, 0.03)),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let vars = m.bind(&mut g);
                let lp = m.forward_batch(&mut g, &vars, &bt).unwrap();
                let loss = loss_graph(&mut g, lp, &bt, &cfg, 0).unwrap();
                g.backward(loss.combined).unwrap();
            })
        });
    }
    group.finish();
}

fn permutation(c: &mut Criterion) {
    let scores = paired(2000, 5);
    let mut group = c.benchmark_group("permutation_test");
    group.sample_size(10);
    group.bench_function("monte_carlo/10000", |b| {
        b.iter(|| paired_permutation_test(&scores, Resampling::MonteCarlo(10_000), 0).unwrap())
    });
    let small = paired(16, 6);
    group.bench_function("exhaustive/16", |b| {
        b.iter(|| paired_permutation_test(&small, Resampling::Exhaustive, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, matmul, regularizers, training_step, permutation);
criterion_main!(benches);
