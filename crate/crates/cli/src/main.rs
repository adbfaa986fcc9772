//! `antler` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use antler_core::io::{write_file, Dataset};
use antler_core::model::AntlerModel;
use antler_core::pipeline::{
    self, export_dataset, load_dataset, prepare_fold, run_methods, sample_fold, streams, tune_lambdas, MethodSet,
    PipelineConfig, PreparedFold,
};
use antler_core::sampler::{balanced_sample, write_sample_csv};
use antler_core::tuner::write_trace_csv;
use antler_core::voxel::{voxelize, voxelize_clamped, write_grid_json, write_tensor_csv, GridSpec};
use antler_core::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "antler", version, about = "Point-cloud regression with tensor embeddings and a regularized VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `evaluation.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override as `dotted.path=value`, value parsed as JSON when possible.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the dataset and write it as a manifest directory.
    Generate(Common),
    /// Voxelize every sample on the shared grid.
    Voxelize(Common),
    /// Voxelize and draw balanced entry samples for every sample.
    Sample(Common),
    /// Fit the tensor decomposition on all samples and export embedding targets.
    SnbtdFit(Common),
    /// Train a model on all samples.
    Train(Common),
    /// Tune the loss weights on all samples by inner cross-validation.
    Tune(Common),
    /// Predict responses with a model directory written by `train`.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Cross-validate the model alone.
    Evaluate(Common),
    /// Cross-validate the feature baseline and the mean predictor.
    Baseline(Common),
    /// Full cross-validated comparison of every method.
    Run(Common),
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct ConfigFailure(anyhow::Error);

fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override {path}: {} is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    bail!("empty override path")
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if !common.overrides.is_empty() {
        let mut value = serde_json::to_value(&cfg)?;
        for o in &common.overrides {
            let (path, raw) = o.split_once('=').with_context(|| format!("override {o:?} is not PATH=VALUE"))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, path, parsed)?;
        }
        cfg = PipelineConfig::from_json(&value.to_string())?;
    }
    if let Some(seed) = common.seed {
        cfg.evaluation.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(cfg.output_dir.clone())
}

fn all_indices(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.len()).collect()
}

/// Every sample treated as training data.
fn prepare_all(cfg: &PipelineConfig, dataset: &Dataset) -> anyhow::Result<PreparedFold> {
    Ok(prepare_fold(cfg, dataset, 0, &all_indices(dataset), &[])?)
}

fn write_preprocess(dir: &Path, grid: &GridSpec, m_r: usize) -> anyhow::Result<()> {
    let body = serde_json::json!({ "grid": grid, "m_r": m_r });
    write_file(&dir.join("preprocess.json"), &serde_json::to_string_pretty(&body)?)?;
    Ok(())
}

fn rows_csv(header: &str, rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> String {
    let mut out = format!("{header}\n");
    for (id, values) in rows {
        out.push_str(&id);
        for v in values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn numbered(prefix: &str, n: usize) -> String {
    (0..n).map(|k| format!(",{prefix}{k}")).collect()
}

fn voxelize_all(cfg: &PipelineConfig, sampled: bool) -> anyhow::Result<u8> {
    let dataset = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let grid = pipeline::training_grid(&dataset, &all_indices(&dataset), &cfg.grid)?;
    write_grid_json(&dir.join("grid.json"), &grid)?;
    if !sampled {
        fs::create_dir_all(dir.join("tensors"))?;
        let mut index = String::from("sample_id,occupied\n");
        for cloud in &dataset.samples {
            let t = voxelize(cloud, &grid)?;
            write_tensor_csv(&dir.join("tensors").join(format!("{}.csv", cloud.sample_id)), &t)?;
            index.push_str(&format!("{},{}\n", cloud.sample_id, t.occupied_count()));
        }
        write_file(&dir.join("tensors.csv"), &index)?;
        println!("voxelized {} samples on a {:?} grid", dataset.len(), grid.dims);
        return Ok(0);
    }
    let sampled = sample_fold(cfg, &dataset, &all_indices(&dataset), &[])?;
    write_preprocess(&dir, &sampled.grid, sampled.m_r)?;
    fs::create_dir_all(dir.join("samples"))?;
    for (cloud, s) in dataset.samples.iter().zip(&sampled.train_samples) {
        write_sample_csv(&dir.join("samples").join(format!("{}.csv", cloud.sample_id)), s)?;
    }
    println!("sampled {} samples with M_r = {}", dataset.len(), sampled.m_r);
    Ok(0)
}

fn snbtd_fit(cfg: &PipelineConfig) -> anyhow::Result<u8> {
    let dataset = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let prep = prepare_all(cfg, &dataset)?;
    prep.posterior.save(&dir.join("snbtd_checkpoint.json"))?;
    let header = format!("sample_id{}", numbered("e", cfg.model.arch.latent_dim));
    let ids = dataset.samples.iter().map(|c| c.sample_id.clone());
    write_file(&dir.join("targets.csv"), &rows_csv(&header, ids.zip(prep.targets.clone())))?;
    println!("decomposition fitted on {} samples", dataset.len());
    Ok(0)
}

fn train(cfg: &PipelineConfig) -> anyhow::Result<u8> {
    let dataset = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let prep = prepare_all(cfg, &dataset)?;
    let model = pipeline::fit_antler(
        cfg,
        &prep.train_samples,
        &dataset.responses,
        &prep.targets,
        cfg.model.lambdas,
        0,
    )?;
    write_preprocess(&dir, &prep.grid, prep.m_r)?;
    prep.posterior.save(&dir.join("snbtd_checkpoint.json"))?;
    model.save(&dir.join("model.json"))?;
    println!("trained on {} samples; model written to {}", dataset.len(), dir.join("model.json").display());
    Ok(0)
}

fn tune(cfg: &PipelineConfig) -> anyhow::Result<u8> {
    let dataset = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let prep = prepare_all(cfg, &dataset)?;
    let (lambdas, trace) = tune_lambdas(cfg, &dataset, &prep)?;
    write_trace_csv(&dir.join("tuning_trace.csv"), &trace)?;
    write_file(&dir.join("lambdas.json"), &serde_json::to_string_pretty(&lambdas)?)?;
    println!(
        "best lambdas: kl {} embedding {} regression {}",
        lambdas.kl, lambdas.embedding, lambdas.regression
    );
    Ok(0)
}

fn predict(cfg: &PipelineConfig, model_dir: &Path) -> anyhow::Result<u8> {
    let model = AntlerModel::load(&model_dir.join("model.json"))?;
    let pre_path = model_dir.join("preprocess.json");
    let pre: Value = serde_json::from_str(&fs::read_to_string(&pre_path).with_context(|| format!("reading {}", pre_path.display()))?)?;
    let grid: GridSpec = serde_json::from_value(pre["grid"].clone())?;
    let m_r = pre["m_r"].as_u64().context("preprocess.json lacks m_r")? as usize;
    let dataset = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let mut out = format!("sample_id,status{}\n", numbered("y", model.response_dim()));
    let mut skipped = 0;
    for (i, cloud) in dataset.samples.iter().enumerate() {
        let tensor = voxelize_clamped(cloud, &grid);
        let result = balanced_sample(&tensor, m_r, cfg.seed(streams::SAMPLER, i as u64)).and_then(|s| model.predict(&s));
        match result {
            Ok(y) => {
                out.push_str(&format!("{},ok", cloud.sample_id));
                for v in y {
                    out.push_str(&format!(",{v}"));
                }
            }
            Err(e @ Error::Capacity { .. }) => {
                skipped += 1;
                out.push_str(&format!("{},\"skipped: {e}\"", cloud.sample_id));
                out.push_str(&",".repeat(model.response_dim()));
            }
            Err(e) => return Err(e.into()),
        }
        out.push('\n');
    }
    write_file(&dir.join("predictions.csv"), &out)?;
    println!("predicted {} samples ({skipped} skipped)", dataset.len() - skipped);
    Ok(0)
}

fn cross_validate(cfg: &PipelineConfig, methods: MethodSet) -> anyhow::Result<u8> {
    let dir = out_dir(cfg)?;
    let report = run_methods(cfg, &dir, methods)?;
    for s in pipeline::summarize(&report.rows) {
        println!(
            "{:<17} response {}: mean RMSE {:.6} (sd {:.6}, {} folds)",
            s.method, s.response_index, s.mean_rmse, s.sd_rmse, s.folds
        );
    }
    println!("results written to {}", report.results_path.display());
    if report.failed_folds > 0 {
        eprintln!("{} fold(s) failed; see results.csv", report.failed_folds);
        return Ok(1);
    }
    Ok(0)
}

fn dispatch(command: &Command) -> Result<u8, ConfigFailure> {
    let common = match command {
        Command::Predict { common, .. } => common,
        Command::Generate(c)
        | Command::Voxelize(c)
        | Command::Sample(c)
        | Command::SnbtdFit(c)
        | Command::Train(c)
        | Command::Tune(c)
        | Command::Evaluate(c)
        | Command::Baseline(c)
        | Command::Run(c) => c,
    };
    let cfg = load_config(common).map_err(ConfigFailure)?;
    let result = match command {
        Command::Generate(_) => load_dataset(&cfg)
            .map_err(anyhow::Error::from)
            .and_then(|d| {
                let dir = out_dir(&cfg)?;
                let manifest = export_dataset(&cfg, &d, &dir)?;
                println!("wrote {} samples to {}", d.len(), manifest.display());
                Ok(0)
            }),
        Command::Voxelize(_) => voxelize_all(&cfg, false),
        Command::Sample(_) => voxelize_all(&cfg, true),
        Command::SnbtdFit(_) => snbtd_fit(&cfg),
        Command::Train(_) => train(&cfg),
        Command::Tune(_) => tune(&cfg),
        Command::Predict { model, .. } => predict(&cfg, model),
        Command::Evaluate(_) => cross_validate(
            &cfg,
            MethodSet {
                antler: true,
                baselines: false,
            },
        ),
        Command::Baseline(_) => cross_validate(
            &cfg,
            MethodSet {
                antler: false,
                baselines: true,
            },
        ),
        Command::Run(_) => cross_validate(&cfg, MethodSet::ALL),
    };
    match result {
        Ok(code) => Ok(code),
        Err(e) if matches!(e.downcast_ref::<Error>(), Some(Error::Config(_))) => Err(ConfigFailure(e)),
        Err(e) => {
            eprintln!("error: {e:#}");
            Ok(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(ConfigFailure(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
    }
}
