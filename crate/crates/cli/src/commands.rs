use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use tailcast::dataio::{load_csv, prepare, Prepared, TimeSeriesFrame};
use tailcast::eval::{export_embeddings, score};
use tailcast::finetune::{finetune_run, sweep, write_sweep_csv, FreezeSpec};
use tailcast::nn::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use tailcast::nn::{init_params, MlpSpec, ParamSet};
use tailcast::synth::generate;
use tailcast::train::{fit, static_weights, training_pool, Strategy, TrainConfig, TrainReport};
use tailcast::{Error, Result};

use crate::config::{DataSource, RunConfig};

const MODEL: &str = "model.json";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Creates the run directory and records the resolved config in it.
fn open_run(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.run_dir();
    create_dir(&dir)?;
    write_json(&dir.join("config.json"), config)?;
    Ok(dir)
}

fn load_frame(config: &RunConfig) -> Result<TimeSeriesFrame> {
    match &config.data {
        DataSource::Synth(spec) => Ok(generate(spec)?.frame),
        DataSource::Csv { path, schema } => load_csv(path, schema),
    }
}

struct Data {
    prepared: Prepared,
    spec: MlpSpec,
}

fn load_data(config: &RunConfig) -> Result<Data> {
    let frame = load_frame(config)?;
    let prepared = prepare(&frame, &config.prepare)?;
    let spec = config.mlp_spec(frame.n_features(), frame.n_targets());
    Ok(Data { prepared, spec })
}

/// Data-dependent preconditions, checked before anything is written.
fn preflight(config: &RunConfig, data: &Data, finetuning: bool) -> Result<()> {
    let split = &data.prepared.split;
    if config.train.strategy == Strategy::Meta && split.eval_extreme.is_empty() {
        return Err(Error::StrategyUnavailable(
            "meta reweighting needs extreme windows in the validation split".into(),
        ));
    }
    let subset = if finetuning {
        tailcast::train::TrainingSubset::ExtremeOnly
    } else {
        config.train.training_subset
    };
    if training_pool(split, subset).is_empty() {
        return Err(Error::EmptySubset(format!("no training windows for subset {subset:?}")));
    }
    Ok(())
}

fn metadata(seed: u64, stage: &str, strategy: Strategy, report: &TrainReport) -> Metadata {
    let mut m = Metadata::new();
    m.insert("seed".into(), json!(seed));
    m.insert("stage".into(), json!(stage));
    m.insert("strategy".into(), json!(strategy.name()));
    m.insert("best_epoch".into(), json!(report.best_epoch));
    m.insert("best_eval_loss".into(), json!(report.best_eval_loss));
    m
}

/// Test-split metrics for every configured subset; empty subsets become null.
fn metrics(config: &RunConfig, params: &ParamSet, data: &Data) -> Result<Value> {
    let mut out = Map::new();
    for &subset in &config.evaluate.subsets {
        let key = serde_json::to_value(subset)?.as_str().unwrap_or_default().to_string();
        let value = match score(params, &data.prepared.split.test, &data.prepared.normalizer, subset) {
            Ok(r) => serde_json::to_value(r)?,
            Err(Error::EmptySubset(msg)) => {
                warn!("{msg}");
                Value::Null
            }
            Err(e) => return Err(e),
        };
        out.insert(key, value);
    }
    Ok(Value::Object(out))
}

fn load_model(path: &Path, expected: &MlpSpec) -> Result<ParamSet> {
    let (params, spec, _) = load_checkpoint(path)?;
    if &spec != expected {
        return Err(Error::Dimension(format!(
            "checkpoint {} holds a {:?} network, the configured data needs {:?}",
            path.display(),
            spec,
            expected
        )));
    }
    Ok(params)
}

fn checkpoint_path(run: &Path, seed: u64, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join(format!("seed-{seed}")).join(MODEL))
}

/// Short content tag of a checkpoint, so outputs for different models never collide.
fn checkpoint_tag(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..6]))
}

pub fn synth(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let DataSource::Synth(spec) = &config.data else {
        return Err(Error::Config("the synth command needs a synth data source".into()));
    };
    let out = generate(spec)?;
    let run = open_run(config)?;
    let csv = run.join("data.csv");
    out.frame.write_csv(&csv)?;
    write_json(&run.join("spikes.json"), &out.spikes)?;
    info!("wrote {} rows and {} spikes", out.frame.n_rows(), out.spikes.len());
    Ok(vec![csv])
}

pub fn train(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_data(config)?;
    preflight(config, &data, false)?;
    let run = open_run(config)?;
    let split = &data.prepared.split;
    write_json(&run.join("split.json"), &split.manifest())?;
    write_json(&run.join("labeling.json"), &data.prepared.labeling)?;
    write_json(&run.join("normalizer.json"), &data.prepared.normalizer)?;
    let mut outputs = Vec::new();
    for &seed in &config.seeds {
        let dir = run.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let tc = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let (params, mut report) = fit(init_params(&data.spec, seed), &data.spec, split, &tc)?;
        report.checkpoint = Some(MODEL.into());
        save_checkpoint(
            &dir.join(MODEL),
            &params,
            &data.spec,
            &metadata(seed, "train", tc.strategy, &report),
        )?;
        write_json(&dir.join("report.json"), &report)?;
        report.write_weight_stats_csv(&dir.join("weight_stats.csv"))?;
        if matches!(tc.strategy, Strategy::Ipf | Strategy::Evt) {
            let pool = training_pool(split, tc.training_subset);
            let statics = static_weights(&pool, split, &tc)?;
            let origins: Vec<usize> = pool.iter().map(|w| w.origin).collect();
            statics.weights.write_csv(&dir.join("weights.csv"), &origins)?;
            if let Some(fit) = &statics.gpd_fit {
                write_json(&dir.join("gpd.json"), fit)?;
            }
        }
        write_json(&dir.join("metrics.json"), &metrics(config, &params, &data)?)?;
        outputs.push(dir);
    }
    Ok(outputs)
}

pub fn finetune(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    let data = load_data(config)?;
    preflight(config, &data, true)?;
    let run = open_run(config)?;
    let split = &data.prepared.split;
    let mut outputs = Vec::new();
    for &seed in &config.seeds {
        let source = checkpoint_path(&run, seed, checkpoint);
        let params = load_model(&source, &data.spec)?;
        let dir = run
            .join(format!("seed-{seed}"))
            .join(format!("finetune-{}", checkpoint_tag(&source)?));
        create_dir(&dir)?;
        let tc = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let freeze: &FreezeSpec = &config.finetune.freeze;
        let (best, mut report, k) = if config.finetune.sweep.is_empty() {
            let (p, r) = finetune_run(&params, &data.spec, split, freeze, &tc)?;
            (p, r, freeze.frozen_prefix)
        } else {
            let outcome = sweep(
                &params,
                &data.spec,
                split,
                &data.prepared.normalizer,
                &config.finetune.sweep,
                freeze,
                &tc,
            )?;
            write_sweep_csv(&dir.join("sweep.csv"), &outcome.rows)?;
            (outcome.best_params, outcome.best_report, outcome.best_k)
        };
        report.checkpoint = Some(MODEL.into());
        let mut meta = metadata(seed, "finetune", report.strategy, &report);
        meta.insert("frozen_prefix".into(), json!(k));
        save_checkpoint(&dir.join(MODEL), &best, &data.spec, &meta)?;
        write_json(&dir.join("report.json"), &report)?;
        report.write_weight_stats_csv(&dir.join("weight_stats.csv"))?;
        write_json(&dir.join("metrics.json"), &metrics(config, &best, &data)?)?;
        outputs.push(dir);
    }
    Ok(outputs)
}

pub fn evaluate(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    let data = load_data(config)?;
    let run = open_run(config)?;
    let mut outputs = Vec::new();
    for &seed in &config.seeds {
        let source = checkpoint_path(&run, seed, checkpoint);
        let params = load_model(&source, &data.spec)?;
        let dir = run.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let path = dir.join(format!("evaluate-{}.json", checkpoint_tag(&source)?));
        write_json(&path, &metrics(config, &params, &data)?)?;
        outputs.push(path);
    }
    Ok(outputs)
}

pub fn export(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    let data = load_data(config)?;
    let run = open_run(config)?;
    let mut outputs = Vec::new();
    for &seed in &config.seeds {
        let source = checkpoint_path(&run, seed, checkpoint);
        let params = load_model(&source, &data.spec)?;
        let dir = run.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let path = dir.join(format!("embeddings-{}.csv", checkpoint_tag(&source)?));
        export_embeddings(&params, &data.prepared.split.test, &config.embeddings, &path)?;
        outputs.push(path);
    }
    Ok(outputs)
}
