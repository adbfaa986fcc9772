use std::time::Instant;

use antler_core::snbtd::{fit_stream, init_posterior, EntryObservation, StreamConfig, UpdateConfig};
use antler_core::stats::normal_cdf;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Probit tensor whose last mode has samples drawn from two ground-truth factor rows.
fn two_group_tensor(rng: &mut ChaCha8Rng) -> (Vec<EntryObservation>, Vec<usize>) {
    let n = 20;
    let draw = |rng: &mut ChaCha8Rng| -> [f64; 3] { [0, 1, 2].map(|_| rng.sample(StandardNormal)) };
    let spatial: Vec<Vec<[f64; 3]>> = (0..2).map(|_| (0..n).map(|_| draw(rng)).collect()).collect();
    let prototypes = [draw(rng), draw(rng)];
    let group: Vec<usize> = (0..n).map(|s| s % 2).collect();
    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for s in 0..n {
                let u = prototypes[group[s]];
                let f = 3.0 * (0..3).map(|r| spatial[0][i][r] * spatial[1][j][r] * u[r]).sum::<f64>();
                let bit = u8::from(rng.random::<f64>() < normal_cdf(f));
                entries.push(EntryObservation { index: vec![i, j, s], bit });
            }
        }
    }
    entries.shuffle(rng);
    (entries, group)
}

#[test]
fn sample_embeddings_cluster_by_ground_truth_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (entries, group) = two_group_tensor(&mut rng);
    let posterior = init_posterior(&[20, 20, 20], &[3, 3, 3], 32, 5).unwrap();
    let cfg = StreamConfig {
        patch_size: 512,
        epochs: 10,
        update: UpdateConfig::default(),
    };
    let posterior = fit_stream(posterior, &entries, &cfg, 9).unwrap();
    let rows = posterior.sample_embedding_means(2).unwrap();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            let d = dist(&rows[a], &rows[b]);
            if group[a] == group[b] { same.push(d) } else { diff.push(d) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&same) < mean(&diff), "within {} vs between {}", mean(&same), mean(&diff));
}

#[test]
fn doubling_frequencies_costs_at_most_quadratically() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let entries: Vec<EntryObservation> = (0..4096)
        .map(|_| EntryObservation {
            index: vec![rng.random_range(0..30), rng.random_range(0..30), rng.random_range(0..30)],
            bit: rng.random_range(0..2),
        })
        .collect();
    let cfg = StreamConfig {
        patch_size: 512,
        epochs: 1,
        update: UpdateConfig::default(),
    };
    let time = |m: usize| {
        // Best of three runs to damp scheduler noise.
        (0..3)
            .map(|_| {
                let p = init_posterior(&[30, 30, 30], &[3, 3, 3], m, 1).unwrap();
                let start = Instant::now();
                fit_stream(p, &entries, &cfg, 2).unwrap();
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (small, large) = (time(64), time(128));
    assert!(large / small <= 4.5, "M 64: {small:.3}s, M 128: {large:.3}s");
}
