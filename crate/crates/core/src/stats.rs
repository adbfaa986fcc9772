//! Small numeric helpers shared by the Bayesian components.

use nalgebra::{DMatrix, SymmetricEigen};
use libm::erfc;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `φ(z) / Φ(z)`, stable for very negative `z`.
pub fn inv_mills(z: f64) -> f64 {
    if z > -30.0 {
        normal_pdf(z) / normal_cdf(z)
    } else {
        // Asymptotic series of Φ(z)/φ(z) for z → −∞.
        let z2 = z * z;
        -z / (1.0 - 1.0 / z2 + 3.0 / (z2 * z2))
    }
}

/// Nodes and weights of the probabilists' Gauss–Hermite rule, normalized so
/// `Σ w f(t)` approximates `E[f(T)]` for `T ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    // Golub–Welsch: Jacobi matrix of the probabilists' Hermite recurrence.
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        let p = normal_cdf(1.0);
        assert!((p - 0.841_344_746_068_542_9).abs() < 1e-14, "{p:e}");
        assert!((normal_cdf(-5.0) - 2.866_515_718_791_939e-7).abs() < 1e-20);
    }

    #[test]
    fn mills_ratio_is_continuous_across_the_switch() {
        let a = inv_mills(-29.999_999);
        let b = inv_mills(-30.000_001);
        assert!((a - b).abs() / a < 1e-6);
        assert!((inv_mills(0.0) - 0.797_884_560_802_865_4).abs() < 1e-14);
    }

    #[test]
    fn hermite_rule_integrates_moments() {
        let (t, w) = gauss_hermite(9);
        let moment = |k: i32| t.iter().zip(&w).map(|(t, w)| w * t.powi(k)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-12);
        assert!(moment(1).abs() < 1e-12);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(16) - 2_027_025.0).abs() / 2_027_025.0 < 1e-9);
    }
}
