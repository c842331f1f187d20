use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use addv::datagen::{generate_set, Layout};
use addv::losses::LossConfig;
use addv::nets::{Model, ModelConfig};
use addv::trainer::{batch_gradients, batch_gradients_sequential};

fn gradients(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let loss = LossConfig::default();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for n in [1, 4] {
        let batch = generate_set(Layout::TwoPlane, n, 64, 64, 0).unwrap();
        group.bench_with_input(BenchmarkId::new("parallel", n), &batch, |b, batch| {
            b.iter(|| batch_gradients(&model, batch, &loss).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &batch, |b, batch| {
            b.iter(|| batch_gradients_sequential(&model, batch, &loss).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients);
criterion_main!(benches);
