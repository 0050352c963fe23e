use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rwalk_bench::{mnist_model, random_batch};
use rwalk_core::fisher::gradient_and_fisher;
use rwalk_core::memory::herding;
use rwalk_core::nn;
use rwalk_core::{AdamConfig, AdamState, FisherMode};

fn forward_backward(c: &mut Criterion) {
    let params = mnist_model(1);
    let batch = random_batch(2, 64, 784);
    let mut g = c.benchmark_group("mlp_784_256_256_10_batch64");
    g.bench_function("forward", |b| {
        b.iter(|| nn::forward(&params, &batch, None).unwrap())
    });
    let cache = nn::forward(&params, &batch, None).unwrap();
    g.bench_function("backward", |b| {
        b.iter(|| nn::backward(&params, &cache, batch.labels()).unwrap())
    });
    for mode in [FisherMode::PerExample, FisherMode::SquaredMeanGradient] {
        g.bench_function(format!("backward_with_fisher_{mode:?}"), |b| {
            b.iter(|| gradient_and_fisher(&params, &cache, batch.labels(), mode).unwrap())
        });
    }
    let grad = nn::backward(&params, &cache, batch.labels()).unwrap();
    g.bench_function("adam_step", |b| {
        b.iter_batched(
            || {
                (
                    params.flat().to_vec(),
                    AdamState::new(AdamConfig::default(), params.flat_len()),
                )
            },
            |(mut theta, mut adam)| adam.step(&mut theta, &grad).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn exemplar_selection(c: &mut Criterion) {
    let params = mnist_model(3);
    let batch = random_batch(4, 1000, 784);
    let feats = nn::features(&params, batch.inputs()).unwrap();
    let dim = params.feature_dim();
    c.bench_function("herding_1000x256_m10", |b| {
        b.iter(|| herding(&feats, dim, 10))
    });
}

criterion_group!(benches, forward_backward, exemplar_selection);
criterion_main!(benches);
