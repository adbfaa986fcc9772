use antler_bench::{cloud_grid, model_and_input, random_entries, wave_cloud, wave_tensor};
use antler_core::model::{draw_noise, ArchConfig};
use antler_core::sampler::balanced_sample;
use antler_core::snbtd::{init_posterior, UpdateConfig};
use antler_core::synth::roughness_response;
use antler_core::voxel::voxelize;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn voxelization(c: &mut Criterion) {
    let cloud = wave_cloud(100);
    let mut group = c.benchmark_group("voxelize");
    for d in [32, 128, 512] {
        let grid = cloud_grid(&cloud, [d; 3]);
        group.bench_with_input(BenchmarkId::from_parameter(d), &grid, |b, g| {
            b.iter(|| voxelize(black_box(&cloud), g).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let tensor = wave_tensor(60, [128; 3]);
    let m_r = 2 * tensor.occupied_count();
    c.bench_function("balanced_sample", |b| b.iter(|| balanced_sample(black_box(&tensor), m_r, 7).unwrap()));
}

fn decomposition(c: &mut Criterion) {
    let dims = [64, 64, 64];
    let patch = random_entries(dims, 512, 3);
    let mut group = c.benchmark_group("snbtd_patch");
    group.sample_size(20);
    for m in [32, 64, 128] {
        let posterior = init_posterior(&dims, &[3, 3, 3], m, 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(m), &posterior, |b, p| {
            b.iter(|| p.update_patch(black_box(&patch), &UpdateConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn model_gradient(c: &mut Criterion) {
    let arch = ArchConfig {
        encoder_hidden: vec![16],
        decoder_hidden: vec![16, 64],
        regressor_hidden: vec![16],
        latent_dim: 8,
        loss_samples: 5,
    };
    let (model, v) = model_and_input(20, &arch);
    let noise = draw_noise(&mut ChaCha8Rng::seed_from_u64(1), 5, 8);
    let target = vec![0.0; 8];
    c.bench_function("loss_and_grad", |b| {
        b.iter(|| model.loss_and_grad(black_box(&v), &[0.1], Some(&target), &noise).unwrap())
    });
}

fn response(c: &mut Criterion) {
    let cloud = wave_cloud(100);
    c.bench_function("roughness_response", |b| b.iter(|| roughness_response(black_box(&cloud)).unwrap()));
}

criterion_group!(benches, voxelization, sampling, decomposition, model_gradient, response);
criterion_main!(benches);
