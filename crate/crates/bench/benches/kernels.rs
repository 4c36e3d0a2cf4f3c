use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use cmr_core::bodymodel::make_mini_model;
use cmr_core::diffcore::{Tape, Tensor};
use cmr_core::meshgraph::{build_adjacency, coarsen, sparse_dense_multiply};
use cmr_core::regressor::{MeshRegressor, MeshTopology};
use cmr_core::trainer::TrainConfig;

fn kernels(c: &mut Criterion) {
    let model = make_mini_model(0, 600, 8, 4).unwrap();
    let template = model.template().clone();
    let n = template.num_vertices();

    let adj = build_adjacency(&template).into_matrix();
    let x: Vec<f64> = (0..n * 64).map(|i| (i as f64 * 0.37).sin()).collect();
    c.bench_function("sparse_multiply_642x64", |b| {
        b.iter(|| sparse_dense_multiply(black_box(&adj), black_box(&x), n, 64).unwrap())
    });

    c.bench_function("coarsen_factor4", |b| b.iter(|| coarsen(black_box(&template), 4.0).unwrap()));

    let config = TrainConfig::default();
    let topology = Arc::new(MeshTopology::new(template, config.coarsen_factor).unwrap());
    let regressor = MeshRegressor::new(config.regressor_config(64, 4), topology, 0).unwrap();
    let image = Tensor::new([64 * 64, 4], (0..64 * 64 * 4).map(|i| ((i % 7) as f64) / 7.0).collect()).unwrap();
    c.bench_function("regressor_forward", |b| b.iter(|| regressor.predict(black_box(&image)).unwrap()));
    c.bench_function("regressor_forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = regressor.params().bind(&tape, true);
            let img = tape.constant(image.clone());
            let out = regressor.forward(&tape, &p, img).unwrap();
            let loss = tape.sum(out.mesh);
            tape.backward(loss)
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
