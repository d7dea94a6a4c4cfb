use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use jepagrasp_bench::{backbone, cloud};
use jepagrasp_core::encoder::{attention_pool, encode_object, EncoderConfig};
use jepagrasp_core::pointops::{fps, group_knn, TokenizerConfig};
use jepagrasp_core::tensorcore::{GradStore, Graph, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = Tensor::<f32>::full(&[n, n], 0.5);
        let b = Tensor::<f32>::full(&[n, n], 0.25);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.input(a.clone()), g.input(b.clone()));
                black_box(g.matmul(x, y).unwrap())
            })
        });
    }
    group.finish();
}

fn point_ops(c: &mut Criterion) {
    let pts = cloud(1024).points;
    c.bench_function("fps_1024_to_64", |b| b.iter(|| fps(black_box(&pts), 64).unwrap()));
    let centers = fps(&pts, 64).unwrap();
    c.bench_function("knn_64x32", |b| b.iter(|| group_knn(black_box(&pts), &centers, 32, 0.3)));
}

fn encoder(c: &mut Criterion) {
    let tok = TokenizerConfig::default();
    let enc = EncoderConfig::default();
    let (store, obj) = backbone(&tok, &enc);
    let mut group = c.benchmark_group("encoder");
    group.sample_size(10);
    group.bench_function("forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = encode_object(&mut g, &store, &enc, &obj.rel, &obj.positions, obj.group_size).unwrap();
            black_box(attention_pool(&mut g, &store, x).unwrap())
        })
    });
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = encode_object(&mut g, &store, &enc, &obj.rel, &obj.positions, obj.group_size).unwrap();
            let p = attention_pool(&mut g, &store, x).unwrap();
            let l = g.mean_axis(p, 1).unwrap();
            let l = g.mean_axis(l, 0).unwrap();
            let grads = g.backward(l).unwrap();
            let mut gs = GradStore::zeros_like(&store);
            gs.accumulate_graph(&g, &grads, &store);
            black_box(gs)
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, point_ops, encoder);
criterion_main!(benches);
