//! k-fold experiment orchestration: preprocessing, decomposition, training,
//! tuning, baselines and result files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{
    baseline_fit_predict, extract_minmax_features, mean_predictor, DEFAULT_FEATURE_TAIL, DEFAULT_NEIGHBORS,
};
use crate::error::{io_err, Error, Result};
use crate::io::{bounding_box_all, read_manifest, write_file, BoxMargin, Dataset};
use crate::metrics::{kfold_split, rmse};
use crate::model::{train, AntlerModel, ArchConfig, Lambdas, TrainConfig};
use crate::sampler::{balanced_sample, compute_mr, BalancedSample};
use crate::snbtd::{fit_stream, init_posterior, EntryObservation, SnbtdPosterior, StreamConfig, DEFAULT_NUM_FREQUENCIES};
use crate::synth::{
    gen_cone, gen_wave, roughness_response, roundness_response, unstructured_dataset, ConeParams,
    UnstructureParams, WaveParams, DEFAULT_ROUNDNESS_BINS,
};
use crate::tuner::{bo_optimize, write_trace_csv, BoConfig, PENALTY};
use crate::voxel::{select_grid_in, voxelize, voxelize_clamped, GridSpec, DEFAULT_MAX_DIM};

pub const ARTIFACT_VERSION: &str = concat!("antler ", env!("CARGO_PKG_VERSION"));
pub const RESULTS_HEADER: &str = "method,fold,response_index,rmse,status";

/// Seed streams. A derived seed is `master + 1_000_000 · stream + index`
/// (wrapping), where `index` is a sample, fold or run position.
pub mod streams {
    pub const GENERATOR: u64 = 1;
    pub const UNSTRUCTURE: u64 = 2;
    pub const FOLDS: u64 = 3;
    /// Indexed by sample position in the dataset.
    pub const SAMPLER: u64 = 4;
    /// The remaining streams are indexed by fold.
    pub const SNBTD_INIT: u64 = 5;
    pub const SNBTD_STREAM: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
    pub const TRAINING: u64 = 8;
    pub const TUNING: u64 = 9;
    pub const TUNING_FOLDS: u64 = 10;
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    master.wrapping_add(stream.wrapping_mul(1_000_000)).wrapping_add(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnstructureSettings {
    pub m_l: usize,
    pub m_u: usize,
    pub m_r: usize,
}

impl Default for UnstructureSettings {
    fn default() -> Self {
        Self { m_l: 100, m_u: 200, m_r: 60 }
    }
}

/// Where the samples come from. Seeds inside generator parameters are
/// replaced by values derived from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Wave {
        #[serde(default)]
        params: WaveParams,
        #[serde(default)]
        unstructure: UnstructureSettings,
    },
    Cone {
        #[serde(default)]
        params: ConeParams,
        #[serde(default)]
        unstructure: UnstructureSettings,
        #[serde(default = "default_roundness_bins")]
        roundness_bins: usize,
    },
    Manifest {
        path: PathBuf,
    },
}

fn default_roundness_bins() -> usize {
    DEFAULT_ROUNDNESS_BINS
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Wave {
            params: WaveParams::default(),
            unstructure: UnstructureSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    pub initial_dims: [usize; 3],
    pub max_dim: usize,
    pub margin: BoxMargin,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            initial_dims: [16; 3],
            max_dim: DEFAULT_MAX_DIM,
            margin: BoxMargin::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    /// Fixed `M_r`; otherwise twice the largest training occupancy.
    pub m_r: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnbtdSettings {
    /// Ranks of the three spatial modes. The sample mode uses the latent dimension.
    pub spatial_ranks: [usize; 3],
    pub num_frequencies: usize,
    pub stream: StreamConfig,
}

impl Default for SnbtdSettings {
    fn default() -> Self {
        Self {
            spatial_ranks: [3; 3],
            num_frequencies: DEFAULT_NUM_FREQUENCIES,
            stream: StreamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub arch: ArchConfig,
    pub lambdas: Lambdas,
    /// `seed` is replaced by a derived value.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSettings {
    pub enabled: bool,
    /// Which of `(λ1, λ2, λ3)` are searched; the others keep their configured values.
    pub tune: [bool; 3],
    /// Search box in log10 units, one interval per lambda.
    pub bounds: [(f64, f64); 3],
    pub budget: usize,
    /// Folds of the inner cross-validation run on each training set.
    pub inner_folds: usize,
    pub bo: BoConfig,
}

impl Default for TuningSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            tune: [true; 3],
            bounds: [(-3.0, 3.0); 3],
            budget: 20,
            inner_folds: 3,
            bo: BoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub feature_tail: usize,
    pub neighbors: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            feature_tail: DEFAULT_FEATURE_TAIL,
            neighbors: DEFAULT_NEIGHBORS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub folds: usize,
    pub master_seed: u64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self { folds: 10, master_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    pub grid: GridSettings,
    pub sampler: SamplerSettings,
    pub snbtd: SnbtdSettings,
    pub model: ModelSettings,
    pub tuning: TuningSettings,
    pub baseline: BaselineSettings,
    pub evaluation: EvaluationSettings,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            grid: GridSettings::default(),
            sampler: SamplerSettings::default(),
            snbtd: SnbtdSettings::default(),
            model: ModelSettings::default(),
            tuning: TuningSettings::default(),
            baseline: BaselineSettings::default(),
            evaluation: EvaluationSettings::default(),
            output_dir: PathBuf::from("antler_out"),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid pipeline config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn master_seed(&self) -> u64 {
        self.evaluation.master_seed
    }

    pub fn seed(&self, stream: u64, index: u64) -> u64 {
        derive_seed(self.master_seed(), stream, index)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.evaluation.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.evaluation.folds));
        }
        if self.grid.initial_dims.iter().any(|&d| d == 0) || self.grid.max_dim < *self.grid.initial_dims.iter().max().unwrap() {
            return bad("grid initial dims must be >= 1 and <= max_dim".into());
        }
        if self.sampler.m_r == Some(0) {
            return bad("M_r override must be >= 1".into());
        }
        if self.snbtd.spatial_ranks.iter().any(|&r| r == 0) || self.snbtd.num_frequencies == 0 {
            return bad("SNBTD ranks and frequency count must be >= 1".into());
        }
        if self.snbtd.stream.patch_size == 0 {
            return bad("SNBTD patch size must be >= 1".into());
        }
        if self.baseline.feature_tail == 0 || self.baseline.neighbors == 0 {
            return bad("baseline feature tail and neighbor count must be >= 1".into());
        }
        if self.tuning.enabled {
            if !self.tuning.tune.iter().any(|&t| t) {
                return bad("tuning is enabled but no lambda is selected".into());
            }
            if self.tuning.inner_folds < 2 {
                return bad("tuning needs at least 2 inner folds".into());
            }
            if self.tuning.bounds.iter().any(|(lo, hi)| !(lo < hi)) {
                return bad("tuning bounds must be non-empty intervals".into());
            }
            if self.tuning.budget < self.tuning.bo.initial_design {
                return bad("tuning budget is below the initial design size".into());
            }
        }
        if let DatasetSource::Wave { unstructure, .. } | DatasetSource::Cone { unstructure, .. } = &self.dataset {
            let UnstructureSettings { m_l, m_u, m_r } = *unstructure;
            if m_r == 0 || m_r % 6 != 0 || m_r > m_l || m_l > m_u {
                return bad(format!("unstructure settings need 6 | m_r <= m_l <= m_u, got {unstructure:?}"));
            }
        }
        Ok(())
    }

    /// The configuration with every generator seed filled in from the master seed.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        let gen_seed = self.seed(streams::GENERATOR, 0);
        match &mut cfg.dataset {
            DatasetSource::Wave { params, .. } => params.seed = gen_seed,
            DatasetSource::Cone { params, .. } => params.seed = gen_seed,
            DatasetSource::Manifest { .. } => {}
        }
        cfg.model.train.seed = self.seed(streams::TRAINING, 0);
        cfg
    }
}

/// Generates or reads the dataset named by the configuration.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let cfg = cfg.resolved();
    let unstructure = |u: &UnstructureSettings| UnstructureParams {
        m_l: u.m_l,
        m_u: u.m_u,
        m_r: u.m_r,
        seed: cfg.seed(streams::UNSTRUCTURE, 0),
    };
    match &cfg.dataset {
        DatasetSource::Wave { params, unstructure: u } => {
            unstructured_dataset(&gen_wave(params)?, &unstructure(u), roughness_response)
        }
        DatasetSource::Cone {
            params,
            unstructure: u,
            roundness_bins,
        } => unstructured_dataset(&gen_cone(params)?, &unstructure(u), |c| roundness_response(c, *roundness_bins)),
        DatasetSource::Manifest { path } => read_manifest(path),
    }
}

/// Everything derived from one training set, reused across lambda settings.
#[derive(Debug, Clone)]
pub struct PreparedFold {
    pub fold: usize,
    /// Dataset positions of the training samples.
    pub train: Vec<usize>,
    /// Dataset positions of the test samples that could be sampled.
    pub test: Vec<usize>,
    /// Test samples left out, with the reason.
    pub skipped: Vec<(usize, String)>,
    pub grid: GridSpec,
    pub m_r: usize,
    pub train_samples: Vec<BalancedSample>,
    pub test_samples: Vec<BalancedSample>,
    /// Sample-mode embedding means of the decomposition, one row per training sample.
    pub targets: Vec<Vec<f64>>,
    pub posterior: SnbtdPosterior,
}

/// Shared grid for a training set: one box around all training clouds, and
/// the finest per-sample refinement any training cloud asks for.
pub fn training_grid(dataset: &Dataset, train: &[usize], settings: &GridSettings) -> Result<GridSpec> {
    let bounds = bounding_box_all(train.iter().map(|&i| &dataset.samples[i]), settings.margin)?;
    let mut dims = settings.initial_dims;
    for &i in train {
        let g = select_grid_in(&dataset.samples[i], bounds, settings.initial_dims, settings.max_dim)?;
        for a in 0..3 {
            dims[a] = dims[a].max(g.dims[a]);
        }
    }
    GridSpec::new(bounds, dims)
}

/// Grid, `M_r` and balanced samples of one fold, before any decomposition.
#[derive(Debug, Clone)]
pub struct SampledFold {
    pub grid: GridSpec,
    pub m_r: usize,
    pub train_samples: Vec<BalancedSample>,
    /// Test positions that could be sampled, with their samples.
    pub test: Vec<usize>,
    pub test_samples: Vec<BalancedSample>,
    pub skipped: Vec<(usize, String)>,
}

/// Voxelizes and samples one fold. Test samples are binned into the training
/// grid with clamping and never influence the grid or `M_r`.
pub fn sample_fold(cfg: &PipelineConfig, dataset: &Dataset, train: &[usize], test: &[usize]) -> Result<SampledFold> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let grid = training_grid(dataset, train, &cfg.grid)?;
    let train_tensors = train
        .iter()
        .map(|&i| voxelize(&dataset.samples[i], &grid))
        .collect::<Result<Vec<_>>>()?;
    let m_r = match cfg.sampler.m_r {
        Some(m) => m,
        None => compute_mr(&train_tensors.iter().map(|t| t.occupied_count()).collect::<Vec<_>>())?,
    };
    let sample_seed = |i: usize| cfg.seed(streams::SAMPLER, i as u64);
    let train_samples = train
        .iter()
        .zip(&train_tensors)
        .map(|(&i, t)| balanced_sample(t, m_r, sample_seed(i)))
        .collect::<Result<Vec<_>>>()?;

    let mut kept = Vec::new();
    let mut test_samples = Vec::new();
    let mut skipped = Vec::new();
    for &i in test {
        let t = voxelize_clamped(&dataset.samples[i], &grid);
        match balanced_sample(&t, m_r, sample_seed(i)) {
            Ok(s) => {
                kept.push(i);
                test_samples.push(s);
            }
            Err(e @ Error::Capacity { .. }) => skipped.push((i, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(SampledFold {
        grid,
        m_r,
        train_samples,
        test: kept,
        test_samples,
        skipped,
    })
}

/// [`sample_fold`] followed by the decomposition of the training samples.
pub fn prepare_fold(
    cfg: &PipelineConfig,
    dataset: &Dataset,
    fold: usize,
    train: &[usize],
    test: &[usize],
) -> Result<PreparedFold> {
    let sampled = sample_fold(cfg, dataset, train, test)?;
    let posterior = fit_decomposition(cfg, &sampled.train_samples, fold)?;
    let targets = posterior.sample_embedding_means(3)?;
    Ok(PreparedFold {
        fold,
        train: train.to_vec(),
        test: sampled.test,
        skipped: sampled.skipped,
        grid: sampled.grid,
        m_r: sampled.m_r,
        train_samples: sampled.train_samples,
        test_samples: sampled.test_samples,
        targets,
        posterior,
    })
}

/// Streams the joint `(x, y, z, sample)` tensor of the training samples.
pub fn fit_decomposition(cfg: &PipelineConfig, samples: &[BalancedSample], fold: usize) -> Result<SnbtdPosterior> {
    let dims = samples
        .first()
        .ok_or_else(|| Error::InsufficientData("no samples to decompose".into()))?
        .grid
        .dims;
    let [rx, ry, rz] = cfg.snbtd.spatial_ranks;
    let posterior = init_posterior(
        &[dims[0], dims[1], dims[2], samples.len()],
        &[rx, ry, rz, cfg.model.arch.latent_dim],
        cfg.snbtd.num_frequencies,
        cfg.seed(streams::SNBTD_INIT, fold as u64),
    )?;
    let entries: Vec<EntryObservation> = samples
        .iter()
        .enumerate()
        .flat_map(|(s, sample)| {
            sample.entries.iter().map(move |e| EntryObservation {
                index: vec![e.index[0], e.index[1], e.index[2], s],
                bit: e.bit,
            })
        })
        .collect();
    fit_stream(posterior, &entries, &cfg.snbtd.stream, cfg.seed(streams::SNBTD_STREAM, fold as u64))
}

fn rows_of(dataset: &Dataset, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| dataset.responses[i].clone()).collect()
}

/// Trains a model on the given training samples and targets.
pub fn fit_antler(
    cfg: &PipelineConfig,
    samples: &[BalancedSample],
    responses: &[Vec<f64>],
    targets: &[Vec<f64>],
    lambdas: Lambdas,
    seed_index: u64,
) -> Result<AntlerModel> {
    let p = responses.first().map_or(0, Vec::len);
    let mut model = AntlerModel::new(
        &cfg.model.arch,
        samples.first().map_or(0, BalancedSample::len),
        p,
        lambdas,
        cfg.seed(streams::MODEL_INIT, seed_index),
    )?;
    model.grid_dims = samples.first().map(|s| s.grid.dims);
    let train_cfg = TrainConfig {
        seed: cfg.seed(streams::TRAINING, seed_index),
        ..cfg.model.train.clone()
    };
    Ok(train(model, samples, responses, Some(targets), &train_cfg)?.0)
}

pub fn predict_all(model: &AntlerModel, samples: &[BalancedSample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| model.predict(s)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Chooses lambdas by Bayesian optimization of inner cross-validated RMSE on
/// the fold's training samples only.
pub fn tune_lambdas(
    cfg: &PipelineConfig,
    dataset: &Dataset,
    prep: &PreparedFold,
) -> Result<(Lambdas, Vec<crate::tuner::TraceRow>)> {
    let t = &cfg.tuning;
    let n = prep.train.len();
    let inner = kfold_split(n, t.inner_folds.min(n), cfg.seed(streams::TUNING_FOLDS, prep.fold as u64))?;
    let responses = rows_of(dataset, &prep.train);
    let base = [cfg.model.lambdas.kl, cfg.model.lambdas.embedding, cfg.model.lambdas.regression];
    let dims: Vec<usize> = (0..3).filter(|&d| t.tune[d]).collect();
    let bounds: Vec<(f64, f64)> = dims.iter().map(|&d| t.bounds[d]).collect();
    let to_lambdas = |x: &[f64]| {
        let mut l = base;
        for (&d, v) in dims.iter().zip(x) {
            l[d] = 10f64.powf(*v);
        }
        Lambdas::from_array(l)
    };
    let mut evaluation = 0u64;
    let objective = |x: &[f64]| -> f64 {
        let lambdas = to_lambdas(x);
        evaluation += 1;
        let mut scores = Vec::with_capacity(inner.len());
        for (f, val) in inner.iter().enumerate() {
            let fit: Vec<usize> = (0..n).filter(|i| !val.contains(i)).collect();
            let pick = |v: &[usize], src: &[BalancedSample]| v.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();
            let pick_rows = |v: &[usize], src: &[Vec<f64>]| v.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();
            // Every evaluation gets its own initialization and noise stream.
            let seed_index = (prep.fold as u64) * 10_000 + evaluation * 10 + f as u64;
            let score = fit_antler(
                cfg,
                &pick(&fit, &prep.train_samples),
                &pick_rows(&fit, &responses),
                &pick_rows(&fit, &prep.targets),
                lambdas,
                1_000_000 + seed_index,
            )
            .and_then(|m| predict_all(&m, &pick(val, &prep.train_samples)))
            .and_then(|pred| rmse(&pred, &pick_rows(val, &responses)));
            match score {
                Ok(r) if r.iter().all(|v| v.is_finite()) => scores.push(mean(&r)),
                _ => return PENALTY,
            }
        }
        mean(&scores)
    };
    let result = bo_optimize(objective, &bounds, t.budget, cfg.seed(streams::TUNING, prep.fold as u64), &t.bo)?;
    Ok((to_lambdas(&result.best_point), result.trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub fold: usize,
    pub response_index: Option<usize>,
    pub rmse: Option<f64>,
    pub status: String,
}

impl ResultRow {
    fn csv_line(&self) -> String {
        let status = if self.status.contains([',', '"', '\n']) {
            format!("\"{}\"", self.status.replace('"', "\"\"").replace('\n', " "))
        } else {
            self.status.clone()
        };
        format!(
            "{},{},{},{},{}",
            self.method,
            self.fold,
            self.response_index.map_or(String::new(), |r| r.to_string()),
            self.rmse.map_or(String::new(), |r| r.to_string()),
            status
        )
    }
}

pub const METHODS: [&str; 3] = ["antler", "feature_baseline", "mean"];

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Parse {
            line: line + 2,
            message: format!("bad {what}"),
        };
        let opt = |s: &str| if s.is_empty() { None } else { Some(s.to_string()) };
        rows.push(ResultRow {
            method: rec[0].to_string(),
            fold: rec[1].parse().map_err(|_| parse_err("fold"))?,
            response_index: opt(&rec[2]).map(|s| s.parse()).transpose().map_err(|_| parse_err("response index"))?,
            rmse: opt(&rec[3]).map(|s| s.parse()).transpose().map_err(|_| parse_err("rmse"))?,
            status: rec[4].to_string(),
        });
    }
    Ok(rows)
}

/// Mean and standard deviation of per-fold RMSE for each method and response.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub response_index: usize,
    pub mean_rmse: f64,
    pub sd_rmse: f64,
    pub folds: usize,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        if let (Some(ri), Some(_)) = (r.response_index, r.rmse) {
            let key = (r.method.clone(), ri);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    keys.into_iter()
        .map(|(method, ri)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.response_index == Some(ri))
                .filter_map(|r| r.rmse)
                .collect();
            let m = mean(&v);
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                method,
                response_index: ri,
                mean_rmse: m,
                sd_rmse: sd,
                folds: v.len(),
            }
        })
        .collect()
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from("method,response_index,mean_rmse,sd_rmse,folds\n");
    for s in summary {
        out.push_str(&format!("{},{},{},{},{}\n", s.method, s.response_index, s.mean_rmse, s.sd_rmse, s.folds));
    }
    out
}

/// Boxplot data: one row per fold and response, one RMSE column per method.
pub fn fold_rmse_csv(rows: &[ResultRow]) -> String {
    let methods: Vec<&str> = METHODS.iter().copied().filter(|m| rows.iter().any(|r| r.method == *m)).collect();
    let mut cells: Vec<(usize, usize)> = rows
        .iter()
        .filter(|r| methods.contains(&r.method.as_str()))
        .filter_map(|r| r.response_index.map(|k| (r.fold, k)))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let mut out = format!("fold,response_index,{}\n", methods.join(","));
    for (fold, k) in cells {
        out.push_str(&format!("{fold},{k}"));
        for m in &methods {
            let v = rows
                .iter()
                .find(|r| r.method == *m && r.fold == fold && r.response_index == Some(k))
                .and_then(|r| r.rmse);
            out.push_str(&v.map_or(",".to_string(), |v| format!(",{v}")));
        }
        out.push('\n');
    }
    out
}

/// Mean over folds of the RMSE for `method`, averaged over responses.
pub fn mean_rmse(rows: &[ResultRow], method: &str) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method).filter_map(|r| r.rmse).collect();
    (!v.is_empty()).then(|| mean(&v))
}

pub fn failed_folds(rows: &[ResultRow]) -> usize {
    let mut folds: Vec<usize> = rows.iter().filter(|r| r.status.starts_with("failed")).map(|r| r.fold).collect();
    folds.dedup();
    folds.len()
}

/// How ANTLER lambdas are chosen in a fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    /// Tune if the configuration enables it, else use configured lambdas.
    Configured,
    Fixed(Lambdas),
    Tuned,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub rows: Vec<ResultRow>,
    pub lambdas: Option<Lambdas>,
    pub model: Option<AntlerModel>,
    pub trace: Vec<crate::tuner::TraceRow>,
}

fn method_rows(method: &str, fold: usize, p: usize, result: Result<Vec<f64>>) -> Vec<ResultRow> {
    match result {
        Ok(r) => r
            .into_iter()
            .enumerate()
            .map(|(k, v)| ResultRow {
                method: method.into(),
                fold,
                response_index: Some(k),
                rmse: Some(v),
                status: "ok".into(),
            })
            .collect(),
        Err(e) => (0..p)
            .map(|k| ResultRow {
                method: method.into(),
                fold,
                response_index: Some(k),
                rmse: None,
                status: format!("failed: {e}"),
            })
            .collect(),
    }
}

/// ANTLER rows for one prepared fold.
pub fn evaluate_antler(
    cfg: &PipelineConfig,
    dataset: &Dataset,
    prep: &PreparedFold,
    choice: LambdaChoice,
) -> FoldOutcome {
    let p = dataset.response_dim();
    let fold = prep.fold;
    let mut trace = Vec::new();
    let lambdas = match choice {
        LambdaChoice::Fixed(l) => Ok(l),
        LambdaChoice::Configured if !cfg.tuning.enabled => Ok(cfg.model.lambdas),
        _ => tune_lambdas(cfg, dataset, prep).map(|(l, t)| {
            trace = t;
            l
        }),
    };
    let fitted = lambdas.and_then(|l| {
        fit_antler(
            cfg,
            &prep.train_samples,
            &rows_of(dataset, &prep.train),
            &prep.targets,
            l,
            fold as u64,
        )
    });
    let (model, result) = match fitted {
        Ok(m) => {
            let r = predict_all(&m, &prep.test_samples).and_then(|pred| rmse(&pred, &rows_of(dataset, &prep.test)));
            (Some(m), r)
        }
        Err(e) => (None, Err(e)),
    };
    FoldOutcome {
        rows: method_rows("antler", fold, p, result),
        lambdas: model.as_ref().map(|m| m.lambdas),
        model,
        trace,
    }
}

/// Baseline rows on the evaluated test samples of a fold.
pub fn evaluate_baselines(
    cfg: &PipelineConfig,
    dataset: &Dataset,
    features: &[Result<Vec<f64>>],
    fold: usize,
    train: &[usize],
    test: &[usize],
) -> Vec<ResultRow> {
    let p = dataset.response_dim();
    let train_y = rows_of(dataset, train);
    let test_y = rows_of(dataset, test);
    let collect = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        idx.iter()
            .map(|&i| features[i].as_ref().map(Clone::clone).map_err(|e| Error::InvalidCloud(e.to_string())))
            .collect()
    };
    let knn = collect(train).and_then(|tr| {
        let te = collect(test)?;
        let k = cfg.baseline.neighbors.min(tr.len());
        baseline_fit_predict(&tr, &train_y, &te, k)
    });
    let mut rows = method_rows("feature_baseline", fold, p, knn.and_then(|pred| rmse(&pred, &test_y)));
    rows.extend(method_rows(
        "mean",
        fold,
        p,
        mean_predictor(&train_y, test.len()).and_then(|pred| rmse(&pred, &test_y)),
    ));
    rows
}

pub fn baseline_features(cfg: &PipelineConfig, dataset: &Dataset) -> Vec<Result<Vec<f64>>> {
    dataset
        .samples
        .iter()
        .map(|c| extract_minmax_features(c, cfg.baseline.feature_tail).map(|f| f.values))
        .collect()
}

/// Train/test positions for every fold.
pub fn fold_plan(cfg: &PipelineConfig, n: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let folds = kfold_split(n, cfg.evaluation.folds, cfg.seed(streams::FOLDS, 0))?;
    Ok(folds
        .iter()
        .map(|test| {
            let mut test = test.clone();
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            (train, test)
        })
        .collect())
}

fn skip_rows(fold: usize, skipped: &[(usize, String)], dataset: &Dataset) -> Vec<ResultRow> {
    skipped
        .iter()
        .map(|(i, reason)| ResultRow {
            method: "skipped_sample".into(),
            fold,
            response_index: None,
            rmse: None,
            status: format!("skipped: sample {} ({reason})", dataset.samples[*i].sample_id),
        })
        .collect()
}

/// Which methods a cross-validation run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSet {
    pub antler: bool,
    pub baselines: bool,
}

impl MethodSet {
    pub const ALL: Self = Self {
        antler: true,
        baselines: true,
    };

    fn names(&self) -> Vec<&'static str> {
        METHODS
            .iter()
            .copied()
            .filter(|m| if *m == "antler" { self.antler } else { self.baselines })
            .collect()
    }
}

fn all_rows(methods: MethodSet, fold: usize, p: usize, status: &str) -> Vec<ResultRow> {
    methods
        .names()
        .into_iter()
        .flat_map(|m| {
            (0..p).map(move |k| ResultRow {
                method: m.to_string(),
                fold,
                response_index: Some(k),
                rmse: None,
                status: status.to_string(),
            })
        })
        .collect()
}

const NO_TEST_SAMPLE: &str = "skipped: no test sample fits the training M_r";

/// Result rows of one prepared fold: ANTLER, then the baselines, then skip records.
pub fn evaluate_fold(
    cfg: &PipelineConfig,
    dataset: &Dataset,
    features: &[Result<Vec<f64>>],
    prep: &PreparedFold,
    choice: LambdaChoice,
) -> FoldOutcome {
    let p = dataset.response_dim();
    if prep.test.is_empty() {
        let mut rows = all_rows(MethodSet::ALL, prep.fold, p, NO_TEST_SAMPLE);
        rows.extend(skip_rows(prep.fold, &prep.skipped, dataset));
        return FoldOutcome {
            rows,
            lambdas: None,
            model: None,
            trace: Vec::new(),
        };
    }
    let mut outcome = evaluate_antler(cfg, dataset, prep, choice);
    outcome
        .rows
        .extend(evaluate_baselines(cfg, dataset, features, prep.fold, &prep.train, &prep.test));
    outcome.rows.extend(skip_rows(prep.fold, &prep.skipped, dataset));
    outcome
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub artifact_version: String,
    pub master_seed: u64,
    pub derived_seeds: serde_json::Value,
    pub config: PipelineConfig,
}

pub fn provenance(cfg: &PipelineConfig) -> Provenance {
    let folds = cfg.evaluation.folds as u64;
    let per_fold = |s: u64| (0..folds).map(|f| cfg.seed(s, f)).collect::<Vec<_>>();
    Provenance {
        artifact_version: ARTIFACT_VERSION.into(),
        master_seed: cfg.master_seed(),
        derived_seeds: serde_json::json!({
            "rule": "master + 1000000 * stream + index",
            "generator": cfg.seed(streams::GENERATOR, 0),
            "unstructure_base": cfg.seed(streams::UNSTRUCTURE, 0),
            "folds": cfg.seed(streams::FOLDS, 0),
            "sampler_base": cfg.seed(streams::SAMPLER, 0),
            "snbtd_init": per_fold(streams::SNBTD_INIT),
            "snbtd_stream": per_fold(streams::SNBTD_STREAM),
            "model_init": per_fold(streams::MODEL_INIT),
            "training": per_fold(streams::TRAINING),
            "tuning": per_fold(streams::TUNING),
            "tuning_folds": per_fold(streams::TUNING_FOLDS),
        }),
        config: cfg.resolved(),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub results_path: PathBuf,
    pub failed_folds: usize,
}

/// Full k-fold experiment. Writes `results.csv`, `summary.csv`,
/// `fold_rmse.csv`, `provenance.json` and per-fold model and checkpoint files
/// under `out_dir`.
pub fn run_experiment(cfg: &PipelineConfig, out_dir: &Path) -> Result<ExperimentReport> {
    run_methods(cfg, out_dir, MethodSet::ALL)
}

/// [`run_experiment`] restricted to some methods. Baseline-only runs skip the
/// decomposition but evaluate the same test samples.
pub fn run_methods(cfg: &PipelineConfig, out_dir: &Path, methods: MethodSet) -> Result<ExperimentReport> {
    cfg.validate()?;
    if !methods.antler && !methods.baselines {
        return Err(Error::Config("no method selected".into()));
    }
    let dataset = load_dataset(cfg)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_file(&out_dir.join("provenance.json"), &serde_json::to_string_pretty(&provenance(cfg))?)?;

    let features = baseline_features(cfg, &dataset);
    let p = dataset.response_dim();
    let mut rows = Vec::new();
    for (fold, (train, test)) in fold_plan(cfg, dataset.len())?.iter().enumerate() {
        if !methods.antler {
            match sample_fold(cfg, &dataset, train, test) {
                Ok(s) => {
                    if s.test.is_empty() {
                        rows.extend(all_rows(methods, fold, p, NO_TEST_SAMPLE));
                    } else {
                        rows.extend(evaluate_baselines(cfg, &dataset, &features, fold, train, &s.test));
                    }
                    rows.extend(skip_rows(fold, &s.skipped, &dataset));
                }
                Err(e) => rows.extend(all_rows(methods, fold, p, &format!("failed: {e}"))),
            }
            continue;
        }
        let dir = out_dir.join(format!("fold_{fold:02}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let prep = match prepare_fold(cfg, &dataset, fold, train, test) {
            Ok(prep) => prep,
            Err(e) => {
                rows.extend(all_rows(methods, fold, p, &format!("failed: {e}")));
                continue;
            }
        };
        prep.posterior.save(&dir.join("snbtd_checkpoint.json"))?;
        let mut outcome = evaluate_fold(cfg, &dataset, &features, &prep, LambdaChoice::Configured);
        if let Some(m) = &outcome.model {
            m.save(&dir.join("model.json"))?;
        }
        if !outcome.trace.is_empty() {
            write_trace_csv(&dir.join("tuning_trace.csv"), &outcome.trace)?;
        }
        if !methods.baselines {
            outcome.rows.retain(|r| r.method == "antler" || r.method == "skipped_sample");
        }
        rows.extend(outcome.rows);
    }

    let results_path = out_dir.join("results.csv");
    write_file(&results_path, &results_csv(&rows))?;
    write_file(&out_dir.join("summary.csv"), &summary_csv(&summarize(&rows)))?;
    write_file(&out_dir.join("fold_rmse.csv"), &fold_rmse_csv(&rows))?;
    Ok(ExperimentReport {
        failed_folds: failed_folds(&rows),
        rows,
        results_path,
    })
}

/// Prepares every fold once; the result can be evaluated under several lambda choices.
pub fn prepare_folds(cfg: &PipelineConfig, dataset: &Dataset) -> Result<Vec<PreparedFold>> {
    fold_plan(cfg, dataset.len())?
        .iter()
        .enumerate()
        .map(|(f, (train, test))| prepare_fold(cfg, dataset, f, train, test))
        .collect()
}

/// Mean-of-folds ANTLER RMSE over prepared folds under one lambda choice.
pub fn antler_cv_rmse(cfg: &PipelineConfig, dataset: &Dataset, folds: &[PreparedFold], choice: LambdaChoice) -> Result<f64> {
    let mut per_fold = Vec::with_capacity(folds.len());
    for prep in folds.iter().filter(|p| !p.test.is_empty()) {
        let outcome = evaluate_antler(cfg, dataset, prep, choice);
        match mean_rmse(&outcome.rows, "antler") {
            Some(v) => per_fold.push(v),
            None => return Err(Error::Numeric(format!("fold {}: {}", prep.fold, outcome.rows[0].status))),
        }
    }
    if per_fold.is_empty() {
        return Err(Error::InsufficientData("no fold had evaluable test samples".into()));
    }
    Ok(mean(&per_fold))
}

/// Writes a generated or loaded dataset as a manifest directory with a
/// provenance sidecar.
pub fn export_dataset(cfg: &PipelineConfig, dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let manifest = crate::io::write_manifest(dir, dataset)?;
    write_file(&dir.join("provenance.json"), &serde_json::to_string_pretty(&provenance(cfg))?)?;
    Ok(manifest)
}
