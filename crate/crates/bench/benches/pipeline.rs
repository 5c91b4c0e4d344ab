//! Microbenchmarks for the four numeric hot paths: the vMF normalizer,
//! the rejection sampler, one entropic transport solve, and one full
//! training step (forward plus backward over every term).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spheregate_core::config::{SinkhornConfig, TrainConfig};
use spheregate_core::networks::{ModelDims, ModelParams};
use spheregate_core::sinkhorn::emd;
use spheregate_core::training::overall_loss;
use spheregate_core::vmf::{self, UnitVector, VmfParams};

fn unit_e0(m: usize) -> UnitVector {
    let mut v = ndarray::Array1::zeros(m);
    v[0] = 1.0;
    UnitVector::new(v).expect("basis vector is unit")
}

fn bench_log_norm_const(c: &mut Criterion) {
    c.bench_function("log_norm_const/m=128 kappa=100", |b| {
        b.iter(|| vmf::log_norm_const(black_box(128), black_box(100.0)).unwrap())
    });
    c.bench_function("log_norm_const/m=128 kappa=1e4", |b| {
        b.iter(|| vmf::log_norm_const(black_box(128), black_box(1e4)).unwrap())
    });
}

fn bench_sampler(c: &mut Criterion) {
    let params = VmfParams::new(unit_e0(128), 100.0).unwrap();
    c.bench_function("vmf_sample/m=128 kappa=100 n=64", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        b.iter(|| vmf::sample(black_box(&params), 64, &mut rng).unwrap())
    });
}

fn bench_emd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p1 = VmfParams::new(unit_e0(32), 50.0).unwrap();
    let p2 = VmfParams::new(unit_e0(32), 5.0).unwrap();
    let z1 = vmf::sample(&p1, 16, &mut rng).unwrap().into_inner();
    let z2 = vmf::sample(&p2, 16, &mut rng).unwrap().into_inner();
    let cfg = SinkhornConfig {
        epsilon: 0.05,
        max_iters: 2_000,
        convergence_tol: 1e-9,
    };
    c.bench_function("emd/16x16 dim=32", |b| {
        b.iter(|| emd(black_box(&z1.view()), black_box(&z2.view()), &cfg).unwrap())
    });
}

fn bench_training_step(c: &mut Criterion) {
    let cfg = TrainConfig {
        latent_dim: 32,
        hidden_dim: 256,
        samples_per_posterior: 4,
        ..TrainConfig::default()
    };
    let (feat, attr, classes, n) = (64usize, 16usize, 8usize, 32usize);
    let dims = ModelDims {
        feat_dim: feat,
        attr_dim: attr,
        latent_dim: cfg.latent_dim,
        hidden_dim: cfg.hidden_dim,
        n_seen_classes: classes,
        kappa_max: cfg.kappa_max,
    };
    let model = ModelParams::init(dims, (0..classes as i64).collect(), 17).unwrap();
    let x = Array2::from_shape_fn((n, feat), |(i, j)| ((i * feat + j) as f64 * 0.29).sin());
    let a = Array2::from_shape_fn((n, attr), |(i, j)| ((i * attr + j) as f64 * 0.53).cos());
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    c.bench_function("training_step/batch=32 hidden=256", |b| {
        b.iter(|| {
            overall_loss(
                black_box(&x.view()),
                black_box(&a.view()),
                &labels,
                &model,
                &cfg,
                23,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_log_norm_const,
    bench_sampler,
    bench_emd,
    bench_training_step
);
criterion_main!(benches);
