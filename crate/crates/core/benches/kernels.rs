//! Sequential versus data-parallel execution of the hot paths. The sequential
//! side runs inside a one-thread pool, which is what the helpers reduce to
//! without the `parallel` feature.

use combinet::arch::{build_combinet, ArchConfig};
use combinet::bayes::{mc_predict, McOptions};
use combinet::ops::conv2d;
use combinet::rng::substream;
use combinet::{ConvSpec, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = substream(seed, "bench", 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut v = vec![("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    v.push(("parallel", rayon::ThreadPoolBuilder::new().num_threads(all).build().unwrap()));
    v
}

fn kernels(c: &mut Criterion) {
    let spec = ConvSpec::dilated3x3(32, 32, 1);
    let x = random(&[2, 32, 64, 64], 1);
    let w = random(&spec.weight_shape(), 2);
    let graph = build_combinet(&ArchConfig::preset("combinet-mini").unwrap(), 3).unwrap();
    let image = random(&[1, 3, 64, 64], 4);

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("conv3x3_32ch_64px", name), |b| {
            b.iter(|| pool.install(|| conv2d(&x, &w, None, &spec).unwrap()))
        });
        group.bench_function(BenchmarkId::new("mini_forward_64px", name), |b| {
            b.iter(|| pool.install(|| graph.infer(&image, &mut substream(0, "b", 0), true).unwrap()))
        });
        group.bench_function(BenchmarkId::new("mc_predict_s8_64px", name), |b| {
            b.iter(|| pool.install(|| mc_predict(&graph, &image, McOptions::new(8, 0)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
