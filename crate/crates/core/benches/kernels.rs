use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use meshformer::augment::dilate;
use meshformer::dataio::{gen_heat_dataset, HeatConfig};
use meshformer::graph::{adjacency_mask, SparseMask};
use meshformer::model::{Model, ModelConfig};
use meshformer::ndiff::attention::neighborhood_forward_seq;
#[cfg(feature = "parallel")]
use meshformer::ndiff::attention::neighborhood_forward_par;
use meshformer::graph::NodeFeatures;
use meshformer::ndiff::Tensor;

fn mesh(n: usize) -> meshformer::graph::Graph {
    let cfg = HeatConfig { trajectories: 1, n_points: n, frames: 2, seed: 3, ..Default::default() };
    gen_heat_dataset(&cfg).unwrap().remove(0).graph
}

fn qkv(n: usize, dh: usize) -> Vec<f64> {
    (0..n * dh).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect()
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("neighborhood_attention");
    for n in [1_000, 8_000] {
        let mask: SparseMask = adjacency_mask(&mesh(n), true);
        let dh = 32;
        let x = qkv(n, dh);
        group.bench_with_input(BenchmarkId::new("sequential", n), &mask, |b, m| {
            b.iter(|| neighborhood_forward_seq(black_box(&x), &x, &x, dh, m))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &mask, |b, m| {
            b.iter(|| neighborhood_forward_par(black_box(&x), &x, &x, dh, m))
        });
    }
    group.finish();
}

fn dilation(c: &mut Criterion) {
    let mask = adjacency_mask(&mesh(4_000), false);
    c.bench_function("dilate_k2_n4000", |b| b.iter(|| dilate(black_box(&mask), 2).unwrap()));
}

fn forward(c: &mut Criterion) {
    let g = mesh(1_000);
    let model = Model::new(ModelConfig::custom(64, 4, 2, 4, 1), 0).unwrap();
    let x = Tensor::from_fn(1_000, 4, |i, j| ((i + j) % 5) as f64 * 0.1);
    let names = (0..4).map(|c| format!("x{c}")).collect();
    let feats = NodeFeatures::new(x, names, vec![true; 4]).unwrap();
    c.bench_function("model_forward_n1000_d64_l4", |b| b.iter(|| model.forward(black_box(&g), &feats, 0).unwrap()));
}

criterion_group!(benches, attention, dilation, forward);
criterion_main!(benches);
