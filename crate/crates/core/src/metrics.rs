//! Cross-validation splits and error metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded shuffle of `0..n` cut into `k` contiguous folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("need 2 <= k <= n for k-fold splitting (k = {k}, n = {n})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Root mean squared error per output column.
pub fn rmse(predictions: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} prediction rows for {} truth rows",
            predictions.len(),
            truth.len()
        )));
    }
    let p = truth[0].len();
    if predictions.iter().chain(truth).any(|r| r.len() != p) {
        return Err(Error::Dimension("rows differ in length".into()));
    }
    let n = truth.len() as f64;
    Ok((0..p)
        .map(|c| {
            let sse: f64 = predictions.iter().zip(truth).map(|(a, b)| (a[c] - b[c]).powi(2)).sum();
            (sse / n).sqrt()
        })
        .collect())
}

/// Area under the ROC curve via the rank-sum statistic, ties counted half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("scores and labels differ in length".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::InsufficientData("AUC needs both classes".into()));
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}
