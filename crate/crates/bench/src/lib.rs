//! Fixtures shared by the benchmarks.

use antler_core::io::{bounding_box, BoxMargin, PointCloud};
use antler_core::model::{canonicalize, AntlerModel, ArchConfig, Lambdas};
use antler_core::sampler::balanced_sample;
use antler_core::snbtd::EntryObservation;
use antler_core::synth::{gen_wave, WaveParams};
use antler_core::voxel::{voxelize, BinaryVoxelTensor, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One noisy wave surface of `side × side` points.
pub fn wave_cloud(side: usize) -> PointCloud {
    let params = WaveParams {
        i1: side,
        i2: side,
        n: 1,
        seed: 3,
        ..WaveParams::default()
    };
    gen_wave(&params).expect("wave generation").remove(0)
}

pub fn cloud_grid(cloud: &PointCloud, dims: [usize; 3]) -> GridSpec {
    GridSpec::new(bounding_box(cloud, BoxMargin::default()).expect("box"), dims).expect("grid")
}

pub fn wave_tensor(side: usize, dims: [usize; 3]) -> BinaryVoxelTensor {
    let cloud = wave_cloud(side);
    voxelize(&cloud, &cloud_grid(&cloud, dims)).expect("voxelize")
}

/// Uniformly random binary observations of a 3-way tensor.
pub fn random_entries(dims: [usize; 3], count: usize, seed: u64) -> Vec<EntryObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| EntryObservation {
            index: dims.iter().map(|&d| rng.random_range(0..d)).collect(),
            bit: rng.random_range(0..2),
        })
        .collect()
}

/// A model sized for a wave sample and one canonical input for it.
pub fn model_and_input(side: usize, arch: &ArchConfig) -> (AntlerModel, Vec<f64>) {
    let tensor = wave_tensor(side, [64; 3]);
    let m_r = 2 * tensor.occupied_count();
    let sample = balanced_sample(&tensor, m_r, 1).expect("sample");
    let model = AntlerModel::new(arch, m_r, 1, Lambdas::default(), 2).expect("model");
    (model, canonicalize(&sample))
}
