//! Rayon pool versus the sequential path.
//!
//! With the default `parallel` feature each workload runs on the global pool
//! and on a one-thread pool. `cargo bench --no-default-features` measures the
//! sequential fallback build instead.

use std::hint::black_box;

use cadc_core::data::digits;
use cadc_core::dendrite::{segment_psums, CadcLayer, ConvMode, DendriteFn};
use cadc_core::net::{NetSpec, Network, WeightArchive};
use cadc_core::partition::{partition, CrossbarConfig};
use cadc_core::tensor::{im2col, ConvSpec, Tensor, UnrolledKernel};
use cadc_core::train::{train, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOY: &str = include_str!("../../../configs/toy_digits.toml");

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("1-thread", one), ("rayon", all)]
}

fn run_on<R: Send>(c: &mut Criterion, group: &str, mut work: impl FnMut() -> R + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    for (label, pool) in pools() {
        let id = BenchmarkId::new(label, pool.current_num_threads());
        g.bench_function(id, |b| b.iter(|| pool.install(|| black_box(work()))));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(|| black_box(work())));
    g.finish();
}

fn psums(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = ConvSpec::new(64, 3, 3, 64).with_padding(1);
    let kernel = UnrolledKernel::from_kernel(&random(&[64, 3, 3, 64], &mut rng), &spec).unwrap();
    let layer = CadcLayer::new(spec, partition(&kernel, &CrossbarConfig::square(128)).unwrap(), DendriteFn::Relu).unwrap();
    let cols = im2col(&random(&[64, 16, 16], &mut rng), &spec).unwrap();
    run_on(c, "segment_psums_64x3x3x64_16x16", || segment_psums(&layer, &cols).unwrap());
}

fn train_epoch(c: &mut Criterion) {
    let spec = NetSpec::from_toml(TOY).unwrap();
    let weights = WeightArchive::init(&spec, 0).unwrap();
    let data = digits(64, 1).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    run_on(c, "train_epoch_toy_64", || {
        let mut net = Network::new(&spec, &weights, CrossbarConfig::square(64)).unwrap();
        train(&mut net, &data, ConvMode::Cadc, &cfg).unwrap()
    });
}

criterion_group!(benches, psums, train_epoch);
criterion_main!(benches);
