//! Variational autoencoder over balanced voxel samples with a regression head.
//!
//! The encoder maps a canonical sample vector to `(μ_z, log σ_z²)`, the decoder
//! maps a latent draw back to per-entry coordinate means and occupancy logits,
//! and the regressor maps `μ_z` to the responses. Training minimizes
//!
//! ```text
//! −log (1/S) Σ_j p(D | z_j) / q(z_j | D)        importance-weighted reconstruction
//! + λ1 · KL(N(μ_z, σ_z²) ‖ N(0, I))
//! + λ2 · ‖μ_z − t‖²                             t: tensor-decomposition embedding
//! + λ3 · ‖g(μ_z) − y‖²
//! ```
//!
//! with plain SGD and hand-written backpropagation. Responses are standardized
//! with the training mean and standard deviation before entering the last term.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::io::write_file;
use crate::sampler::BalancedSample;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

/// Dense layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub type MlpGrad = Vec<LayerGrad>;

impl Mlp {
    /// Tanh hidden layers and a linear output, Xavier-uniform weights, zero biases.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    inputs: fan_in,
                    outputs: fan_out,
                    weights: (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; fan_out],
                    activation: if l + 1 == n { Activation::Linear } else { Activation::Tanh },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    fn check_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Dimension(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::Dimension(format!("layer {i} does not chain to layer {}", i - 1)));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} holds non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.layers.iter().fold(x.to_vec(), |a, l| layer_forward(l, &a))
    }

    /// All activations, starting with the input itself.
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let next = layer_forward(l, acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    fn zero_grad(&self) -> MlpGrad {
        self.layers
            .iter()
            .map(|l| LayerGrad {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect()
    }

    /// Accumulates parameter gradients for `grad_out = ∂loss/∂output` and
    /// returns `∂loss/∂input` when asked for.
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grad: &mut MlpGrad, want_input: bool) -> Option<Vec<f64>> {
        let mut delta = grad_out.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Tanh {
                for (d, a) in delta.iter_mut().zip(&acts[li + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let input = &acts[li];
            let g = &mut grad[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if li == 0 && !want_input {
                return None;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        Some(delta)
    }

    fn apply(&mut self, grad: &MlpGrad, step: f64) {
        for (l, g) in self.layers.iter_mut().zip(grad) {
            for (w, d) in l.weights.iter_mut().zip(&g.weights) {
                *w -= step * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= step * d;
            }
        }
    }
}

fn layer_forward(l: &Layer, x: &[f64]) -> Vec<f64> {
    (0..l.outputs)
        .map(|o| {
            let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
            let s = l.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            match l.activation {
                Activation::Tanh => s.tanh(),
                Activation::Linear => s,
            }
        })
        .collect()
}

fn add_grad(acc: &mut MlpGrad, other: &MlpGrad) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.weights.iter_mut().zip(&o.weights) {
            *x += y;
        }
        for (x, y) in a.bias.iter_mut().zip(&o.bias) {
            *x += y;
        }
    }
}

/// Canonical VAE input: entries sorted by `(i, j, k)`, indices scaled to
/// `[0, 1]` by `dim − 1` per axis, emitted as `(x, y, z, b)` quadruples.
pub fn canonicalize(sample: &BalancedSample) -> Vec<f64> {
    let mut entries: Vec<_> = sample.entries.iter().collect();
    entries.sort_by_key(|e| e.index);
    let dims = sample.grid.dims;
    let scale = |c: usize, axis: usize| {
        if dims[axis] > 1 {
            c as f64 / (dims[axis] - 1) as f64
        } else {
            0.0
        }
    };
    entries
        .iter()
        .flat_map(|e| {
            let [i, j, k] = e.index;
            [scale(i, 0), scale(j, 1), scale(k, 2), f64::from(e.bit)]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub regressor_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub loss_samples: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![256, 64],
            decoder_hidden: vec![64, 256],
            regressor_hidden: vec![32, 16],
            latent_dim: 8,
            loss_samples: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub kl: f64,
    pub embedding: f64,
    pub regression: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            kl: 1.0,
            embedding: 0.1,
            regression: 10.0,
        }
    }
}

impl Lambdas {
    pub fn from_array([kl, embedding, regression]: [f64; 3]) -> Self {
        Self {
            kl,
            embedding,
            regression,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.kl, self.embedding, self.regression]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::Config(format!("lambdas must be finite and >= 0, got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntlerModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub regressor: Mlp,
    pub lambdas: Lambdas,
    pub loss_samples: usize,
    pub latent_dim: usize,
    pub m_r: usize,
    /// Grid the canonical coordinates were normalized against.
    pub grid_dims: Option<[usize; 3]>,
    /// `ŷ = response_offset + response_scale ⊙ regressor(μ_z)`.
    pub response_offset: Vec<f64>,
    pub response_scale: Vec<f64>,
    pub seed: u64,
}

/// The four loss terms, already multiplied by their lambdas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub kl: f64,
    pub embedding: f64,
    pub regression: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.kl + self.embedding + self.regression
    }

    fn add(&mut self, o: &LossTerms) {
        self.reconstruction += o.reconstruction;
        self.kl += o.kl;
        self.embedding += o.embedding;
        self.regression += o.regression;
    }

    fn scale(&mut self, s: f64) {
        self.reconstruction *= s;
        self.kl *= s;
        self.embedding *= s;
        self.regression *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
    pub regressor: MlpGrad,
}

impl ModelGrad {
    /// Named parameter groups in the same order as [`AntlerModel::parameter_groups_mut`].
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (net, grads) in [("encoder", &self.encoder), ("decoder", &self.decoder), ("regressor", &self.regressor)] {
            for (i, g) in grads.iter().enumerate() {
                out.push((format!("{net}.{i}.weights"), g.weights.as_slice()));
                out.push((format!("{net}.{i}.bias"), g.bias.as_slice()));
            }
        }
        out
    }
}

/// Deterministic encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Decoder output for one latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub coordinates: Vec<f64>,
    pub occupancy: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Straight-line `log p(D | z)` for a canonical vector and decoder outputs.
fn reconstruction_log_likelihood(canonical: &[f64], decoded: &[f64], m_r: usize) -> f64 {
    let mut ll = 0.0;
    for e in 0..m_r {
        for c in 0..3 {
            let d = canonical[4 * e + c] - decoded[3 * e + c];
            ll -= 0.5 * (d * d + LN_2PI);
        }
        let logit = decoded[3 * m_r + e];
        ll += canonical[4 * e + 3] * logit - softplus(logit);
    }
    ll
}

impl AntlerModel {
    pub fn new(arch: &ArchConfig, m_r: usize, response_dim: usize, lambdas: Lambdas, seed: u64) -> Result<Self> {
        lambdas.validate()?;
        if m_r == 0 || response_dim == 0 || arch.latent_dim == 0 || arch.loss_samples == 0 {
            return Err(Error::Config("M_r, response dim, latent dim and S must be >= 1".into()));
        }
        let l = arch.latent_dim;
        let widths = |input: usize, hidden: &[usize], output: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(output);
            w
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: Mlp::new(&widths(4 * m_r, &arch.encoder_hidden, 2 * l), &mut rng)?,
            decoder: Mlp::new(&widths(l, &arch.decoder_hidden, 4 * m_r), &mut rng)?,
            regressor: Mlp::new(&widths(l, &arch.regressor_hidden, response_dim), &mut rng)?,
            lambdas,
            loss_samples: arch.loss_samples,
            latent_dim: l,
            m_r,
            grid_dims: None,
            response_offset: vec![0.0; response_dim],
            response_scale: vec![1.0; response_dim],
            seed,
        })
    }

    pub fn response_dim(&self) -> usize {
        self.response_offset.len()
    }

    fn check_canonical(&self, v: &[f64]) -> Result<()> {
        if v.len() != 4 * self.m_r {
            return Err(Error::Dimension(format!(
                "canonical vector has length {}, model expects 4·M_r = {}",
                v.len(),
                4 * self.m_r
            )));
        }
        Ok(())
    }

    /// Uses the mean and standard deviation of `responses` to scale the regression output.
    pub fn set_response_scaling(&mut self, responses: &[Vec<f64>]) -> Result<()> {
        let p = self.response_dim();
        if responses.is_empty() || responses.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension(format!("responses must be non-empty rows of length {p}")));
        }
        let n = responses.len() as f64;
        for c in 0..p {
            let mean = responses.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = responses.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            self.response_offset[c] = mean;
            self.response_scale[c] = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 };
        }
        Ok(())
    }

    fn standardize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.response_offset.iter().zip(&self.response_scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }

    pub fn encode_canonical(&self, v: &[f64]) -> Result<Encoding> {
        self.check_canonical(v)?;
        let out = self.encoder.forward(v);
        let l = self.latent_dim;
        let enc = Encoding {
            mean: out[..l].to_vec(),
            sd: out[l..].iter().map(|lv| (0.5 * lv).exp()).collect(),
        };
        if enc.mean.iter().chain(&enc.sd).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("encoder produced a non-finite value".into()));
        }
        Ok(enc)
    }

    pub fn encode(&self, sample: &BalancedSample) -> Result<Encoding> {
        self.encode_canonical(&canonicalize(sample))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Reconstruction> {
        if z.len() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "latent vector has length {}, expected {}",
                z.len(),
                self.latent_dim
            )));
        }
        let out = self.decoder.forward(z);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoder produced a non-finite value".into()));
        }
        let m3 = 3 * self.m_r;
        Ok(Reconstruction {
            coordinates: out[..m3].to_vec(),
            occupancy: out[m3..].iter().map(|&v| sigmoid(v)).collect(),
        })
    }

    pub fn predict_canonical(&self, v: &[f64]) -> Result<Vec<f64>> {
        let enc = self.encode_canonical(v)?;
        let out = self.regressor.forward(&enc.mean);
        Ok(out
            .iter()
            .zip(self.response_offset.iter().zip(&self.response_scale))
            .map(|(g, (o, s))| o + s * g)
            .collect())
    }

    pub fn predict(&self, sample: &BalancedSample) -> Result<Vec<f64>> {
        if sample.entries.len() != self.m_r {
            return Err(Error::Dimension(format!(
                "sample has {} entries, model was trained with M_r = {}",
                sample.entries.len(),
                self.m_r
            )));
        }
        self.predict_canonical(&canonicalize(sample))
    }

    fn check_loss_inputs(&self, y: &[f64], target: Option<&[f64]>, noise: &[Vec<f64>]) -> Result<()> {
        if y.len() != self.response_dim() {
            return Err(Error::Dimension(format!(
                "response has length {}, expected {}",
                y.len(),
                self.response_dim()
            )));
        }
        match target {
            None if self.lambdas.embedding > 0.0 => {
                return Err(Error::Config("an embedding target is required when λ2 > 0".into()))
            }
            Some(t) if t.len() != self.latent_dim => {
                return Err(Error::Dimension(format!(
                    "embedding target has length {}, expected {}",
                    t.len(),
                    self.latent_dim
                )))
            }
            _ => {}
        }
        if noise.is_empty() || noise.iter().any(|n| n.len() != self.latent_dim) {
            return Err(Error::Dimension(format!(
                "noise must be S rows of length {}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Loss terms for one canonical sample under the given `S × L` noise.
    pub fn loss_canonical(&self, v: &[f64], y: &[f64], target: Option<&[f64]>, noise: &[Vec<f64>]) -> Result<LossTerms> {
        self.check_canonical(v)?;
        self.check_loss_inputs(y, target, noise)?;
        Ok(self.loss_impl(v, y, target, noise, false).0)
    }

    /// Loss terms and the gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        v: &[f64],
        y: &[f64],
        target: Option<&[f64]>,
        noise: &[Vec<f64>],
    ) -> Result<(LossTerms, ModelGrad)> {
        self.check_canonical(v)?;
        self.check_loss_inputs(y, target, noise)?;
        let (terms, grad) = self.loss_impl(v, y, target, noise, true);
        Ok((terms, grad.unwrap()))
    }

    fn loss_impl(
        &self,
        v: &[f64],
        y: &[f64],
        target: Option<&[f64]>,
        noise: &[Vec<f64>],
        with_grad: bool,
    ) -> (LossTerms, Option<ModelGrad>) {
        let l = self.latent_dim;
        let m_r = self.m_r;
        let lam = self.lambdas;
        let enc_acts = self.encoder.forward_cached(v);
        let enc_out = enc_acts.last().unwrap();
        let mu = &enc_out[..l];
        let logvar = &enc_out[l..];
        let sd: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();

        // Importance weights a_j = log p(D|z_j) − log q(z_j|D).
        let log_sd_sum: f64 = logvar.iter().map(|lv| 0.5 * lv).sum();
        let mut log_w = Vec::with_capacity(noise.len());
        let mut dec_cache = Vec::with_capacity(noise.len());
        for eps in noise {
            let z: Vec<f64> = (0..l).map(|i| mu[i] + sd[i] * eps[i]).collect();
            let acts = self.decoder.forward_cached(&z);
            let log_p = reconstruction_log_likelihood(v, acts.last().unwrap(), m_r);
            let log_q: f64 = eps.iter().map(|e| -0.5 * e * e - 0.5 * LN_2PI).sum::<f64>() - log_sd_sum;
            log_w.push(log_p - log_q);
            if with_grad {
                dec_cache.push(acts);
            }
        }
        let s = noise.len() as f64;
        let lse = log_sum_exp(&log_w);
        let reconstruction = -(lse - s.ln());

        let kl = 0.5 * (0..l).map(|i| mu[i] * mu[i] + sd[i] * sd[i] - 1.0 - logvar[i]).sum::<f64>();
        let embedding = target.map_or(0.0, |t| mu.iter().zip(t).map(|(m, t)| (m - t).powi(2)).sum());
        let y_std = self.standardize(y);
        let reg_acts = self.regressor.forward_cached(mu);
        let g = reg_acts.last().unwrap();
        let regression: f64 = g.iter().zip(&y_std).map(|(a, b)| (a - b).powi(2)).sum();

        let terms = LossTerms {
            reconstruction,
            kl: lam.kl * kl,
            embedding: lam.embedding * embedding,
            regression: lam.regression * regression,
        };
        if !with_grad {
            return (terms, None);
        }

        let mut grad = ModelGrad {
            encoder: self.encoder.zero_grad(),
            decoder: self.decoder.zero_grad(),
            regressor: self.regressor.zero_grad(),
        };
        let mut d_mu = vec![0.0; l];
        let mut d_sd = vec![0.0; l];
        let mut d_logvar = vec![0.0; l];

        for (j, (eps, acts)) in noise.iter().zip(&dec_cache).enumerate() {
            // ∂term1/∂a_j = −softmax(a)_j.
            let wj = -(log_w[j] - lse).exp();
            if wj == 0.0 {
                continue;
            }
            let out = acts.last().unwrap();
            let mut d_out = vec![0.0; 4 * m_r];
            for e in 0..m_r {
                for c in 0..3 {
                    d_out[3 * e + c] = wj * (v[4 * e + c] - out[3 * e + c]);
                }
                let logit = out[3 * m_r + e];
                d_out[3 * m_r + e] = wj * (v[4 * e + 3] - sigmoid(logit));
            }
            let d_z = self.decoder.backward(acts, &d_out, &mut grad.decoder, true).unwrap();
            for i in 0..l {
                d_mu[i] += d_z[i];
                d_sd[i] += d_z[i] * eps[i];
                // −log q contributes +log σ to a_j.
                d_logvar[i] += wj * 0.5;
            }
        }

        let g_std: Vec<f64> = g.iter().zip(&y_std).map(|(a, b)| 2.0 * lam.regression * (a - b)).collect();
        let d_mu_reg = self.regressor.backward(&reg_acts, &g_std, &mut grad.regressor, true).unwrap();
        for i in 0..l {
            d_mu[i] += lam.kl * mu[i] + d_mu_reg[i];
            if let Some(t) = target {
                d_mu[i] += 2.0 * lam.embedding * (mu[i] - t[i]);
            }
            d_logvar[i] += d_sd[i] * 0.5 * sd[i] + lam.kl * 0.5 * (sd[i] * sd[i] - 1.0);
        }
        let mut d_enc = d_mu;
        d_enc.extend(d_logvar);
        self.encoder.backward(&enc_acts, &d_enc, &mut grad.encoder, false);
        (terms, Some(grad))
    }

    /// Loss of one sample; `mu_target` is required when λ2 > 0.
    pub fn antler_loss(
        &self,
        sample: &BalancedSample,
        y: &[f64],
        mu_target: Option<&[f64]>,
        noise: &[Vec<f64>],
    ) -> Result<LossTerms> {
        self.loss_canonical(&canonicalize(sample), y, mu_target, noise)
    }

    /// Named mutable parameter slices: `encoder.0.weights`, `encoder.0.bias`, …
    pub fn parameter_groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (net, mlp) in [
            ("encoder", &mut self.encoder),
            ("decoder", &mut self.decoder),
            ("regressor", &mut self.regressor),
        ] {
            for (i, layer) in mlp.layers.iter_mut().enumerate() {
                out.push((format!("{net}.{i}.weights"), layer.weights.as_mut_slice()));
                out.push((format!("{net}.{i}.bias"), layer.bias.as_mut_slice()));
            }
        }
        out
    }

    fn apply(&mut self, grad: &ModelGrad, step: f64) {
        self.encoder.apply(&grad.encoder, step);
        self.decoder.apply(&grad.decoder, step);
        self.regressor.apply(&grad.regressor, step);
    }

    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        for net in [&self.encoder, &self.decoder, &self.regressor] {
            net.check_chain()?;
        }
        let l = self.latent_dim;
        let p = self.response_dim();
        let shapes = [
            (self.encoder.input_dim(), 4 * self.m_r),
            (self.encoder.output_dim(), 2 * l),
            (self.decoder.input_dim(), l),
            (self.decoder.output_dim(), 4 * self.m_r),
            (self.regressor.input_dim(), l),
            (self.regressor.output_dim(), p),
            (self.response_scale.len(), p),
        ];
        if shapes.iter().any(|(a, b)| a != b) || self.loss_samples == 0 {
            return Err(Error::Dimension("model networks do not match M_r, L and p".into()));
        }
        Ok(())
    }
}

/// Sum of per-sample losses, each under its own noise matrix.
pub fn dataset_loss(
    model: &AntlerModel,
    canonical: &[Vec<f64>],
    responses: &[Vec<f64>],
    targets: Option<&[Vec<f64>]>,
    noise: &[Vec<Vec<f64>>],
) -> Result<LossTerms> {
    if canonical.len() != responses.len() || canonical.len() != noise.len() {
        return Err(Error::Dimension("samples, responses and noise differ in length".into()));
    }
    let mut total = LossTerms::default();
    for i in 0..canonical.len() {
        let t = targets.map(|t| t[i].as_slice());
        total.add(&model.loss_canonical(&canonical[i], &responses[i], t, &noise[i])?);
    }
    Ok(total)
}

pub fn draw_noise(rng: &mut impl Rng, samples: usize, latent_dim: usize) -> Vec<Vec<f64>> {
    (0..samples)
        .map(|_| (0..latent_dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop when the moving-average epoch loss improves by less than this fraction.
    pub tolerance: f64,
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 1,
            max_epochs: 100,
            seed: 0,
            tolerance: 1e-4,
            window: 10,
        }
    }
}

/// Per-epoch means of the four loss terms.
pub type LossHistory = Vec<LossTerms>;

/// Runs SGD on `model`. The regression output is first rescaled to the
/// mean and standard deviation of `responses`.
pub fn train(
    mut model: AntlerModel,
    samples: &[BalancedSample],
    responses: &[Vec<f64>],
    targets: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
) -> Result<(AntlerModel, LossHistory)> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size must be >= 1 and learning rate > 0".into()));
    }
    if samples.is_empty() || samples.len() != responses.len() {
        return Err(Error::Dimension("need one response row per sample".into()));
    }
    if let Some(t) = targets {
        if t.len() != samples.len() || t.iter().any(|r| r.len() != model.latent_dim) {
            return Err(Error::Dimension(format!(
                "embedding targets must be {} rows of length {}",
                samples.len(),
                model.latent_dim
            )));
        }
    } else if model.lambdas.embedding > 0.0 {
        return Err(Error::Config("embedding targets are required when λ2 > 0".into()));
    }
    model.validate()?;
    let canonical: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            if s.entries.len() == model.m_r {
                Ok(canonicalize(s))
            } else {
                Err(Error::Dimension(format!(
                    "sample has {} entries, model expects M_r = {}",
                    s.entries.len(),
                    model.m_r
                )))
            }
        })
        .collect::<Result<_>>()?;
    model.set_response_scaling(responses)?;
    model.grid_dims = Some(samples[0].grid.dims);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history: LossHistory = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let checkpoint = model.clone();
        order.shuffle(&mut rng);
        let mut epoch_terms = LossTerms::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<ModelGrad> = None;
            for &i in batch {
                let noise = draw_noise(&mut rng, model.loss_samples, model.latent_dim);
                let t = targets.map(|t| t[i].as_slice());
                let (terms, grad) = model.loss_and_grad(&canonical[i], &responses[i], t, &noise)?;
                if !terms.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        last_finite: Box::new(checkpoint),
                    });
                }
                epoch_terms.add(&terms);
                match acc.as_mut() {
                    Some(a) => {
                        add_grad(&mut a.encoder, &grad.encoder);
                        add_grad(&mut a.decoder, &grad.decoder);
                        add_grad(&mut a.regressor, &grad.regressor);
                    }
                    None => acc = Some(grad),
                }
            }
            model.apply(&acc.unwrap(), cfg.learning_rate / batch.len() as f64);
        }
        epoch_terms.scale(1.0 / samples.len() as f64);
        history.push(epoch_terms);
        if model.validate().is_err() {
            return Err(Error::Diverged {
                epoch,
                last_finite: Box::new(checkpoint),
            });
        }
        if converged(&history, cfg.window, cfg.tolerance) {
            break;
        }
    }
    Ok((model, history))
}

fn converged(history: &[LossTerms], window: usize, tolerance: f64) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let n = history.len();
    let avg = |end: usize| history[end - window..end].iter().map(LossTerms::total).sum::<f64>() / window as f64;
    let (prev, now) = (avg(n - 1), avg(n));
    (prev - now) / prev.abs().max(f64::MIN_POSITIVE) < tolerance
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    antler_model_v1: AntlerModel,
}

impl AntlerModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            antler_model_v1: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.antler_model_v1.validate()?;
        Ok(file.antler_model_v1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}
