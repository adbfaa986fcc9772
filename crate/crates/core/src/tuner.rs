//! Bayesian optimization with a squared-exponential Gaussian process and
//! expected improvement, used to pick the loss weights in log₁₀ space.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_file;
use crate::stats::{normal_cdf, normal_pdf};

pub const PENALTY: f64 = 1e6;
pub const DEFAULT_INITIAL_DESIGN: usize = 8;
pub const DEFAULT_CANDIDATES: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoState {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
    pub prior_mean: f64,
}

fn se_kernel(a: &[f64], b: &[f64], lengthscales: &[f64], signal_var: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    signal_var * (-0.5 * r2).exp()
}

fn cholesky_with_jitter(k: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = k.nrows();
    if let Some(ch) = k.clone().cholesky() {
        return Ok(ch);
    }
    (k + DMatrix::identity(n, n) * 1e-8)
        .cholesky()
        .ok_or_else(|| Error::Numeric("kernel matrix is singular after jitter".into()))
}

/// Factorized training system reused across many queries.
struct GpFit<'a> {
    state: &'a BoState,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
}

impl<'a> GpFit<'a> {
    fn new(state: &'a BoState) -> Result<Self> {
        state.validate()?;
        let n = state.points.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            se_kernel(&state.points[i], &state.points[j], &state.lengthscales, state.signal_var)
                + if i == j { state.noise_var } else { 0.0 }
        });
        let chol = cholesky_with_jitter(k)?;
        let resid = DVector::from_iterator(n, state.values.iter().map(|v| v - state.prior_mean));
        let alpha = chol.solve(&resid);
        Ok(Self { state, chol, alpha })
    }

    fn predict(&self, q: &[f64]) -> (f64, f64) {
        let s = self.state;
        let kq = DVector::from_iterator(
            s.points.len(),
            s.points.iter().map(|p| se_kernel(p, q, &s.lengthscales, s.signal_var)),
        );
        let mean = s.prior_mean + kq.dot(&self.alpha);
        let v = self.chol.solve(&kq);
        (mean, (s.signal_var - kq.dot(&v)).max(0.0))
    }
}

impl BoState {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() || self.points.len() != self.values.len() {
            return Err(Error::InsufficientData("GP needs at least one observation".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("observed values must be finite".into()));
        }
        let d = self.lengthscales.len();
        if self.points.iter().any(|p| p.len() != d) {
            return Err(Error::Dimension("observation and length-scale dimensions differ".into()));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0)) || !(self.signal_var > 0.0) || !(self.noise_var >= 0.0) {
            return Err(Error::Config("kernel hyperparameters must be positive".into()));
        }
        Ok(())
    }

    /// Best observed value (minimization).
    pub fn incumbent(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Log marginal likelihood of the observations.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let fit = GpFit::new(self)?;
        let n = self.values.len() as f64;
        let resid = DVector::from_iterator(self.values.len(), self.values.iter().map(|v| v - self.prior_mean));
        let log_det: f64 = fit.chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Ok(-0.5 * resid.dot(&fit.alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }
}

/// GP posterior mean and variance at `query`.
pub fn gp_posterior(state: &BoState, query: &[f64]) -> Result<(f64, f64)> {
    if query.len() != state.lengthscales.len() {
        return Err(Error::Dimension("query dimension differs from the kernel".into()));
    }
    Ok(GpFit::new(state)?.predict(query))
}

/// Expected improvement below `best` for a Gaussian prediction.
pub fn expected_improvement_from(mean: f64, var: f64, best: f64) -> f64 {
    let sd = var.max(0.0).sqrt();
    let gain = best - mean;
    if sd <= 0.0 {
        return gain.max(0.0);
    }
    let u = gain / sd;
    (gain * normal_cdf(u) + sd * normal_pdf(u)).max(0.0)
}

pub fn expected_improvement(state: &BoState, query: &[f64]) -> Result<f64> {
    let (m, v) = gp_posterior(state, query)?;
    Ok(expected_improvement_from(m, v, state.incumbent()))
}

/// Maximum-likelihood hyperparameters over a grid of length-scales (as
/// fractions of each bound width) and noise ratios; the signal variance is
/// profiled out in closed form.
pub fn fit_hyperparameters(points: &[Vec<f64>], values: &[f64], bounds: &[(f64, f64)]) -> Result<BoState> {
    let n = values.len();
    let d = bounds.len();
    let prior_mean = values.iter().sum::<f64>() / n as f64;
    let spread = values.iter().map(|v| (v - prior_mean).powi(2)).sum::<f64>() / n as f64;
    let fractions = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
    let noise_ratios = [1e-6, 1e-4, 1e-2, 1e-1];
    let mut best: Option<(f64, BoState)> = None;
    let combos = fractions.len().pow(d as u32);
    for combo in 0..combos {
        let mut c = combo;
        let lengthscales: Vec<f64> = bounds
            .iter()
            .map(|(lo, hi)| {
                let f = fractions[c % fractions.len()];
                c /= fractions.len();
                f * (hi - lo)
            })
            .collect();
        for &ratio in &noise_ratios {
            let unit = BoState {
                points: points.to_vec(),
                values: values.to_vec(),
                lengthscales: lengthscales.clone(),
                signal_var: 1.0,
                noise_var: ratio,
                prior_mean,
            };
            let Ok(fit) = GpFit::new(&unit) else { continue };
            let resid = DVector::from_iterator(n, values.iter().map(|v| v - prior_mean));
            let quad = resid.dot(&fit.alpha);
            let signal_var = (quad / n as f64).max(1e-12 * spread.max(1e-300));
            let log_det_unit: f64 = fit.chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
            let lml = -0.5 * n as f64 * (signal_var.ln() + 1.0) - 0.5 * log_det_unit;
            if lml.is_finite() && best.as_ref().is_none_or(|(b, _)| lml > *b) {
                best = Some((
                    lml,
                    BoState {
                        signal_var,
                        noise_var: ratio * signal_var,
                        ..unit
                    },
                ));
            }
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| Error::Numeric("no hyperparameter setting produced a valid GP".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub point: Vec<f64>,
    pub objective: f64,
    pub incumbent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub initial_design: usize,
    pub candidates: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            initial_design: DEFAULT_INITIAL_DESIGN,
            candidates: DEFAULT_CANDIDATES,
        }
    }
}

fn latin_hypercube(rng: &mut ChaCha8Rng, bounds: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = bounds
        .iter()
        .map(|(lo, hi)| {
            let mut strata: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(strata.as_mut_slice(), rng);
            strata
                .iter()
                .map(|&s| lo + (hi - lo) * (s as f64 + rng.random::<f64>()) / n as f64)
                .collect()
        })
        .collect();
    (0..n).map(|i| cols.iter_mut().map(|c| c[i]).collect()).collect()
}

/// Minimizes `objective` over the box `bounds` within `budget` evaluations.
pub fn bo_optimize(
    mut objective: impl FnMut(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    budget: usize,
    seed: u64,
    cfg: &BoConfig,
) -> Result<BoResult> {
    if bounds.is_empty() || bounds.iter().any(|(lo, hi)| !(lo < hi)) {
        return Err(Error::Config("bounds must be non-empty intervals".into()));
    }
    if cfg.initial_design == 0 || budget < cfg.initial_design {
        return Err(Error::Config(format!(
            "budget {budget} is below the initial design size {}",
            cfg.initial_design
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let mut values: Vec<f64> = Vec::with_capacity(budget);
    let mut trace = Vec::with_capacity(budget);
    let mut record = |x: Vec<f64>, points: &mut Vec<Vec<f64>>, values: &mut Vec<f64>, trace: &mut Vec<TraceRow>| {
        let y = objective(&x);
        let y = if y.is_finite() { y } else { PENALTY };
        let incumbent = values.iter().copied().fold(y, f64::min);
        trace.push(TraceRow {
            iter: trace.len(),
            point: x.clone(),
            objective: y,
            incumbent,
        });
        points.push(x);
        values.push(y);
    };
    for x in latin_hypercube(&mut rng, bounds, cfg.initial_design) {
        record(x, &mut points, &mut values, &mut trace);
    }
    while points.len() < budget {
        let x = propose(&points, &values, bounds, cfg, &mut rng)?;
        record(x, &mut points, &mut values, &mut trace);
    }
    let best = (0..values.len())
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .unwrap();
    Ok(BoResult {
        best_point: points[best].clone(),
        best_value: values[best],
        trace,
    })
}

fn propose(
    points: &[Vec<f64>],
    values: &[f64],
    bounds: &[(f64, f64)],
    cfg: &BoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    // Penalized points would dominate the surrogate; cap them at the worst real value.
    let worst_real = values
        .iter()
        .copied()
        .filter(|v| *v < PENALTY)
        .fold(f64::NEG_INFINITY, f64::max);
    let cap = if worst_real.is_finite() { worst_real } else { 0.0 };
    let fitted: Vec<f64> = values.iter().map(|&v| if v >= PENALTY { cap } else { v }).collect();
    let state = fit_hyperparameters(points, &fitted, bounds)?;
    let fit = GpFit::new(&state)?;
    let best = state.incumbent();
    let ei = |x: &[f64]| {
        let (m, v) = fit.predict(x);
        expected_improvement_from(m, v, best)
    };

    let mut scored: Vec<(f64, Vec<f64>)> = (0..cfg.candidates.max(1))
        .map(|_| {
            let x: Vec<f64> = bounds.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect();
            (ei(&x), x)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(5);

    // Local refinement: shrinking Gaussian perturbations around the best candidates.
    for (score, x) in scored.iter_mut() {
        let mut scale = 0.1;
        for _ in 0..6 {
            for _ in 0..10 {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(bounds)
                    .map(|(v, (lo, hi))| {
                        let step = Normal::new(0.0, scale * (hi - lo)).unwrap().sample(rng);
                        (v + step).clamp(*lo, *hi)
                    })
                    .collect();
                let s = ei(&trial);
                if s > *score {
                    *score = s;
                    *x = trial;
                }
            }
            scale *= 0.5;
        }
    }
    let (_, x) = scored
        .into_iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one candidate");
    Ok(x)
}

/// `iter,log_lambda1,log_lambda2,log_lambda3,objective,incumbent`.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("iter,log_lambda1,log_lambda2,log_lambda3,objective,incumbent\n");
    for row in trace {
        let coords: Vec<String> = row.point.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.iter,
            coords.join(","),
            row.objective,
            row.incumbent
        ));
    }
    write_file(path, &out)
}
