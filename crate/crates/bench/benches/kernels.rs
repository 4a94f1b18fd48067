use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mba_core::channel::{realize, SystemConfig};
use mba_core::estimator::{complex_gaussian, LsOperator};
use mba_core::linalg::ComplexMatrix;
use mba_core::network::{MbaModel, NetConfig};
use mba_core::pilot::dft_matrix;
use mba_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for width in [16, 32] {
        let x = random(&[64, width, 4, 16], 1);
        let k = random(&[width, width, 3, 3], 2);
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let xn = g.constant(x.clone()).unwrap();
                let kn = g.constant(k.clone()).unwrap();
                g.conv2d(xn, kn, None).unwrap()
            })
        });
    }
    group.finish();
}

fn ls(c: &mut Criterion) {
    let mut group = c.benchmark_group("ls_estimate");
    for m in [16, 64] {
        let psi = dft_matrix(m).unwrap();
        let op = LsOperator::new(psi.matrix()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = ComplexMatrix::from_fn(4, m, |_, _| complex_gaussian(&mut rng, 1.0));
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| op.apply(&y).unwrap())
        });
    }
    group.finish();
}

fn channel(c: &mut Criterion) {
    let cfg = SystemConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    c.bench_function("channel_realization_k16", |b| {
        b.iter(|| realize(&cfg, &mut rng).unwrap())
    });
}

fn inference(c: &mut Criterion) {
    let model = MbaModel::new(
        NetConfig {
            width: 32,
            attn_width: 16,
            ..NetConfig::default()
        },
        5,
    )
    .unwrap();
    let x = random(&[64, 2, 4, 16], 6);
    c.bench_function("mba_inference_batch64", |b| b.iter(|| model.predict_mba(&x).unwrap()));
}

criterion_group!(benches, conv, ls, channel, inference);
criterion_main!(benches);
