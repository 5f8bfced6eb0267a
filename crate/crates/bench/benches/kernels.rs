//! Benchmarks for the hot numeric kernels: windowing, forward/gradient
//! passes on the production net, Hessian-vector products, and one full
//! second-order meta-gradient.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use metaemg_bench::{bench_batch, bench_params, bench_task, small_net, standard_net};
use metaemg_core::meta::{meta_gradient, MetaConfig};
use metaemg_core::nn::{batch_gradient, batch_loss, loss_hvp, ModelParams};

fn bench_windowing(c: &mut Criterion) {
    let task = bench_task(100.0);
    c.bench_function("support_batch materialization (231 windows)", |b| {
        b.iter(|| task.support_batch())
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let net = standard_net();
    let params = bench_params(&net);
    let batch = bench_batch(500.0); // 47 windows x 1600

    c.bench_function("batch_loss, full net, 47 windows", |b| {
        b.iter(|| batch_loss(&params, &batch).unwrap())
    });
    c.bench_function("batch_gradient, full net, 47 windows", |b| {
        b.iter(|| batch_gradient(&params, &batch).unwrap())
    });
    c.bench_function("loss_hvp, full net, 47 windows", |b| {
        let v = ModelParams::from_flat(&net, vec![1e-3; params.len()]).unwrap();
        b.iter(|| loss_hvp(&params, &batch, &v).unwrap())
    });
}

fn bench_meta_gradient(c: &mut Criterion) {
    let net = small_net();
    let params = metaemg_core::nn::init_params(&net, 3);
    let task = bench_task(500.0);
    let support = task.support_batch();
    let query = task.query_batch();
    let cfg = MetaConfig { alpha: 0.01, inner_steps: 2, ..MetaConfig::new(1) };

    c.bench_function("second-order meta_gradient, 64/32 net, M=2", |b| {
        b.iter_batched(
            || params.clone(),
            |p| meta_gradient(&p, &support, &query, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_windowing, bench_forward_backward, bench_meta_gradient
}
criterion_main!(benches);
