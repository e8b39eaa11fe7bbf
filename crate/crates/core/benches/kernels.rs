//! Sequential vs data-parallel execution of the hot kernels.
//!
//! Without the `parallel` feature both variants run the same sequential
//! code, which makes the overhead of the dispatch itself visible.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subsynth::attacks::{self, AttackConfig};
use subsynth::autodiff::kernels::{self, ConvGeometry, Exec};
use subsynth::models::{Classifier, ClassifierConfig};
use subsynth::Tensor;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn values(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = values(n * n, 1);
        let b = values(n * n, 2);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| kernels::matmul(exec, black_box(&a), black_box(&b), n, n, n))
            });
        }
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let g = ConvGeometry::conv([64, 16, 16, 16], [32, 16, 3, 3], 1, 1).unwrap();
    let x = values(g.input_len(), 3);
    let k = values(32 * 16 * 9, 4);
    let go = values(g.output_len(), 5);
    group.throughput(Throughput::Elements(g.macs() as u64));
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| kernels::conv2d_forward(exec, &g, black_box(&x), black_box(&k)))
        });
        group.bench_function(BenchmarkId::new("backward_input", name), |b| {
            b.iter(|| kernels::conv2d_backward_input(exec, &g, black_box(&go), black_box(&k)))
        });
        group.bench_function(BenchmarkId::new("backward_kernel", name), |b| {
            b.iter(|| kernels::conv2d_backward_kernel(exec, &g, black_box(&go), black_box(&x)))
        });
    }
    group.finish();
}

fn batch_logits(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_logits");
    let model = Classifier::<f32>::new(ClassifierConfig::default(), [1, 16, 16], 10, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    for b in [64, 1024] {
        let x = Tensor::new(&[b, 1, 16, 16], values(b * 256, 7).into_iter().map(|v| v.abs()).collect()).unwrap();
        group.throughput(Throughput::Elements(b as u64));
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, b), &x, |bench, x| {
                bench.iter(|| model.logits(black_box(x), exec).unwrap())
            });
        }
    }
    group.finish();
}

/// Five independent PGD runs, the way transfer evaluation crafts them.
fn attack_runs(c: &mut Criterion) {
    let mut group = c.benchmark_group("pgd_runs");
    group.sample_size(10);
    let model = Classifier::<f32>::new(ClassifierConfig::Mlp { hidden: vec![32, 32] }, [2, 1, 1], 3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let x = Tensor::new(&[500, 2, 1, 1], values(1000, 9).into_iter().map(|v| 0.5 + 0.4 * v).collect()).unwrap();
    let labels: Vec<usize> = (0..500).map(|i| i % 3).collect();
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                kernels::map_exec(exec, (0..5u64).collect(), |run| {
                    attacks::run_attack(&model, &x, &labels, &AttackConfig::pgd(0.1).with_seed(run)).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, conv, batch_logits, attack_runs);
criterion_main!(benches);
