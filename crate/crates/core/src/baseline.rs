//! Comparison methods: min/max coordinate features with k-nearest-neighbor
//! regression, and the training-mean predictor.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{write_file, Point3, PointCloud};

pub const DEFAULT_FEATURE_TAIL: usize = 64;
pub const DEFAULT_NEIGHBORS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// The cloud had fewer than `2·k_f` points, so some tails repeat points.
    pub padded: bool,
}

/// For each axis, the `k_f` smallest points (ascending) then the `k_f` largest
/// (descending), each contributing `(x, y, z)`: `18·k_f` values in total.
pub fn extract_minmax_features(cloud: &PointCloud, k_f: usize) -> Result<FeatureVector> {
    if k_f == 0 {
        return Err(Error::Config("k_f must be >= 1".into()));
    }
    let pts = cloud.points();
    if pts.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut values = Vec::with_capacity(18 * k_f);
    for axis in 0..3 {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&a, &b| {
            pts[a][axis]
                .total_cmp(&pts[b][axis])
                .then_with(|| lex_cmp(&pts[a], &pts[b]))
                .then(a.cmp(&b))
        });
        let take = k_f.min(order.len());
        let low = &order[..take];
        let high: Vec<usize> = order.iter().rev().take(take).copied().collect();
        for tail in [low, high.as_slice()] {
            for r in 0..k_f {
                // Short clouds repeat the last selected point.
                let p = pts[tail[r.min(take - 1)]];
                values.extend_from_slice(&p);
            }
        }
    }
    Ok(FeatureVector {
        values,
        padded: pts.len() < 2 * k_f,
    })
}

fn lex_cmp(a: &Point3, b: &Point3) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Inverse-distance-weighted k-NN in training-standardized feature space.
pub fn baseline_fit_predict(
    train_features: &[Vec<f64>],
    train_responses: &[Vec<f64>],
    test_features: &[Vec<f64>],
    k_nn: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = train_features.len();
    if n == 0 || n != train_responses.len() {
        return Err(Error::Dimension("need one response row per training feature row".into()));
    }
    if k_nn == 0 || k_nn > n {
        return Err(Error::Config(format!("k_nn = {k_nn} must be in 1..={n}")));
    }
    let dim = train_features[0].len();
    let p = train_responses[0].len();
    if train_features.iter().chain(test_features).any(|f| f.len() != dim)
        || train_responses.iter().any(|r| r.len() != p)
    {
        return Err(Error::Dimension("feature or response rows differ in length".into()));
    }
    if train_features.iter().chain(test_features).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }

    let mut kept = Vec::new();
    for d in 0..dim {
        let mean = train_features.iter().map(|f| f[d]).sum::<f64>() / n as f64;
        let var = train_features.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs().max(1.0) {
            kept.push((d, mean, sd));
        }
    }
    let standardize = |f: &[f64]| -> Vec<f64> { kept.iter().map(|&(d, m, s)| (f[d] - m) / s).collect() };
    let train: Vec<Vec<f64>> = train_features.iter().map(|f| standardize(f)).collect();

    Ok(test_features
        .iter()
        .map(|f| {
            let q = standardize(f);
            let mut dist: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| (t.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nearest = &dist[..k_nn];
            let exact: Vec<usize> = nearest.iter().filter(|(d, _)| *d == 0.0).map(|&(_, i)| i).collect();
            let weighted: Vec<(f64, usize)> = if exact.is_empty() {
                nearest.iter().map(|&(d, i)| (1.0 / d, i)).collect()
            } else {
                exact.iter().map(|&i| (1.0, i)).collect()
            };
            let total: f64 = weighted.iter().map(|w| w.0).sum();
            (0..p)
                .map(|c| weighted.iter().map(|&(w, i)| w * train_responses[i][c]).sum::<f64>() / total)
                .collect()
        })
        .collect())
}

pub fn mean_predictor(train_responses: &[Vec<f64>], test_size: usize) -> Result<Vec<Vec<f64>>> {
    let n = train_responses.len();
    if n == 0 {
        return Err(Error::InsufficientData("mean predictor needs a training response".into()));
    }
    let p = train_responses[0].len();
    let mean: Vec<f64> = (0..p)
        .map(|c| train_responses.iter().map(|r| r[c]).sum::<f64>() / n as f64)
        .collect();
    Ok(vec![mean; test_size])
}

/// One row per sample: `sample_id,f0,f1,…`.
pub fn write_features_csv(path: &Path, ids: &[String], features: &[FeatureVector]) -> Result<()> {
    let dim = features.first().map_or(0, |f| f.values.len());
    let mut out = String::from("sample_id");
    for j in 0..dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (id, f) in ids.iter().zip(features) {
        out.push_str(id);
        for v in &f.values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn six_extreme_points() {
        let pts = vec![
            [-1.0, 0.0, 0.0],
            [2.0, 0.1, 0.1],
            [0.0, -3.0, 0.2],
            [0.1, 4.0, 0.3],
            [0.2, 0.2, -5.0],
            [0.3, 0.3, 6.0],
            [0.5, 0.5, 0.5],
        ];
        let c = PointCloud::new("s", pts.clone()).unwrap();
        let f = extract_minmax_features(&c, 1).unwrap();
        let expected: Vec<f64> = [0, 1, 2, 3, 4, 5].iter().flat_map(|&i| pts[i]).collect();
        assert_eq!(f.values, expected);
        assert!(!f.padded);
    }

    #[test]
    fn features_match_full_sort_and_ignore_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pts: Vec<Point3> = (0..1000)
            .map(|_| [rng.random_range(0..20) as f64, rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let f = extract_minmax_features(&PointCloud::new("a", pts.clone()).unwrap(), 10).unwrap();
        assert_eq!(f.values.len(), 180);
        // Reference: sort whole points by a composite key per axis.
        let mut expected: Vec<f64> = Vec::new();
        for axis in 0..3 {
            let mut sorted = pts.clone();
            sorted.sort_by(|a, b| {
                let ka = [a[axis], a[0], a[1], a[2]];
                let kb = [b[axis], b[0], b[1], b[2]];
                ka.partial_cmp(&kb).unwrap()
            });
            expected.extend(sorted[..10].iter().flatten());
            expected.extend(sorted.iter().rev().take(10).flatten());
        }
        assert_eq!(f.values, expected);
        pts.shuffle(&mut rng);
        let g = extract_minmax_features(&PointCloud::new("b", pts).unwrap(), 10).unwrap();
        assert_eq!(f.values, g.values);
    }

    #[test]
    fn short_clouds_pad() {
        let c = PointCloud::new("s", vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let f = extract_minmax_features(&c, 3).unwrap();
        assert!(f.padded);
        assert_eq!(f.values.len(), 54);
        assert_eq!(&f.values[..9], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn coinciding_point_returns_its_response() {
        let train = vec![vec![0.0, 1.0], vec![1.0, 3.0], vec![2.0, 2.0]];
        let y = vec![vec![10.0], vec![20.0], vec![30.0]];
        let pred = baseline_fit_predict(&train, &y, &[vec![1.0, 3.0]], 1).unwrap();
        assert_eq!(pred, vec![vec![20.0]]);
        let pred = baseline_fit_predict(&train, &y, &[vec![1.0, 3.0]], 3).unwrap();
        assert_eq!(pred, vec![vec![20.0]]);
        let flat = vec![vec![5.0]; 3];
        let pred = baseline_fit_predict(&train, &flat, &[vec![0.3, 0.1], vec![9.0, 9.0]], 2).unwrap();
        assert!(pred.iter().all(|p| (p[0] - 5.0).abs() < 1e-12));
        assert!(baseline_fit_predict(&train, &y, &[vec![0.0, 0.0]], 4).is_err());
    }

    #[test]
    fn knn_matches_all_pairs_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            // Third column constant: it must be dropped from the metric.
            vec![rng.random::<f64>() * 10.0, rng.random::<f64>(), 4.0]
        };
        let train: Vec<Vec<f64>> = (0..200).map(|_| row(&mut rng)).collect();
        let y: Vec<Vec<f64>> = train.iter().map(|f| vec![f[0] + f[1], f[0] * f[1]]).collect();
        let test: Vec<Vec<f64>> = (0..20).map(|_| row(&mut rng)).collect();
        let got = baseline_fit_predict(&train, &y, &test, 4).unwrap();

        let stats: Vec<(f64, f64)> = (0..2)
            .map(|d| {
                let m = train.iter().map(|f| f[d]).sum::<f64>() / 200.0;
                let v = train.iter().map(|f| (f[d] - m).powi(2)).sum::<f64>() / 200.0;
                (m, v.sqrt())
            })
            .collect();
        for (q, g) in test.iter().zip(&got) {
            let mut all: Vec<(f64, usize)> = Vec::new();
            for (i, t) in train.iter().enumerate() {
                let d2: f64 = (0..2).map(|d| ((t[d] - q[d]) / stats[d].1).powi(2)).sum();
                all.push((d2.sqrt(), i));
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let w: f64 = all[..4].iter().map(|(d, _)| 1.0 / d).sum();
            for c in 0..2 {
                let e: f64 = all[..4].iter().map(|(d, i)| y[*i][c] / d).sum::<f64>() / w;
                assert!((g[c] - e).abs() < 1e-10 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mean_predictor_rules() {
        assert_eq!(mean_predictor(&[vec![1.0], vec![3.0]], 3).unwrap(), vec![vec![2.0]; 3]);
        assert_eq!(mean_predictor(&[vec![4.0, 5.0]], 2).unwrap(), vec![vec![4.0, 5.0]; 2]);
        assert!(mean_predictor(&[], 2).is_err());
    }
}
