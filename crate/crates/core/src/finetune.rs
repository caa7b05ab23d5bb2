//! Extreme-only fine-tuning with a frozen input-side prefix of dense layers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Normalizer, SplitResult};
use crate::error::{Error, Result};
use crate::eval::{score, Subset};
use crate::nn::{MlpSpec, ParamSet, TrainableMask};
use crate::train::{fit_with, mean_loss, FitOptions, Strategy, TrainConfig, TrainReport, TrainingSubset};

pub const DEFAULT_SWEEP: [usize; 5] = [0, 2, 4, 6, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezeSpec {
    /// Dense layers frozen from the input side.
    pub frozen_prefix: usize,
    /// L2 coefficient applied to the trainable layers.
    pub l2: f64,
    pub max_epochs: usize,
    /// Keep the training strategy's weights on the extreme pool instead of
    /// uniform weights.
    pub reuse_strategy_weights: bool,
}

impl Default for FreezeSpec {
    fn default() -> Self {
        Self {
            frozen_prefix: 4,
            l2: 1e-6,
            max_epochs: 500,
            reuse_strategy_weights: false,
        }
    }
}

/// Marks the first `k` dense layers frozen.
pub fn freeze(params: &ParamSet, k: usize) -> Result<TrainableMask> {
    let n = params.layer_count();
    if k > n {
        return Err(Error::Config(format!(
            "cannot freeze {k} layers of a {n}-layer network"
        )));
    }
    Ok(TrainableMask {
        layers: (0..n).map(|l| l >= k).collect(),
    })
}

/// The training configuration fine-tuning actually runs with.
pub fn finetune_config(base: &TrainConfig, freeze_spec: &FreezeSpec) -> TrainConfig {
    TrainConfig {
        strategy: if freeze_spec.reuse_strategy_weights {
            base.strategy
        } else {
            Strategy::Unweighted
        },
        training_subset: TrainingSubset::ExtremeOnly,
        l2: freeze_spec.l2,
        max_epochs: freeze_spec.max_epochs,
        ..base.clone()
    }
}

/// Retrains `params` on the extreme training windows with the prefix frozen.
/// The starting parameters compete in best-epoch selection, so the result is
/// never worse on the extreme evaluation set.
pub fn finetune_run(
    params: &ParamSet,
    spec: &MlpSpec,
    split: &SplitResult,
    freeze_spec: &FreezeSpec,
    base: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    let mask = freeze(params, freeze_spec.frozen_prefix)?;
    if !split.train.iter().any(|w| w.extreme) {
        return Err(Error::EmptySubset("no extreme training windows to fine-tune on".into()));
    }
    let config = finetune_config(base, freeze_spec);
    if mask.trainable_count() == 0 {
        return Ok((params.clone(), frozen_report(params, split, &config)?));
    }
    let options = FitOptions {
        mask,
        include_initial: true,
    };
    fit_with(params.clone(), spec, split, &config, &options)
}

fn frozen_report(params: &ParamSet, split: &SplitResult, config: &TrainConfig) -> Result<TrainReport> {
    let (windows, monitored) = if split.eval_extreme.is_empty() {
        (&split.validation, "validation")
    } else {
        (&split.eval_extreme, "eval_extreme")
    };
    if windows.is_empty() {
        return Err(Error::EmptySubset("validation split is empty".into()));
    }
    let batch = crate::dataio::to_batch(&windows.iter().collect::<Vec<_>>());
    Ok(TrainReport {
        strategy: config.strategy,
        training_subset: config.training_subset,
        pool_size: split.train.iter().filter(|w| w.extreme).count(),
        monitored: monitored.into(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_eval_loss: mean_loss(params, &batch)?,
        stopped_epoch: 0,
        early_stopped: false,
        static_weight_mean: None,
        gpd_fit: None,
        ipf_histogram: None,
        dropout_policy: "no trainable layers".into(),
        checkpoint: None,
        weight_stats: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    /// Extreme-evaluation loss of the fine-tuned model; used for selection.
    pub eval_loss: f64,
    /// Extreme-test metrics in raw units; NaN when the test split has none.
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub best_k: usize,
    pub best_params: ParamSet,
    pub best_report: TrainReport,
}

/// Fine-tunes once per `k` and keeps the run with the lowest evaluation loss.
pub fn sweep(
    params: &ParamSet,
    spec: &MlpSpec,
    split: &SplitResult,
    normalizer: &Normalizer,
    ks: &[usize],
    freeze_spec: &FreezeSpec,
    base: &TrainConfig,
) -> Result<SweepOutcome> {
    if ks.is_empty() {
        return Err(Error::Config("empty freeze sweep".into()));
    }
    for &k in ks {
        freeze(params, k)?;
    }
    let mut rows = Vec::with_capacity(ks.len());
    let mut best: Option<(usize, ParamSet, TrainReport)> = None;
    for &k in ks {
        let fs = FreezeSpec {
            frozen_prefix: k,
            ..freeze_spec.clone()
        };
        let (p, report) = finetune_run(params, spec, split, &fs, base)?;
        let (mae, rmse) = match score(&p, &split.test, normalizer, Subset::Extreme) {
            Ok(m) => (m.mae, m.rmse),
            Err(Error::EmptySubset(_)) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        rows.push(SweepRow {
            k,
            eval_loss: report.best_eval_loss,
            mae,
            rmse,
        });
        if best.as_ref().map_or(true, |(_, _, b)| report.best_eval_loss < b.best_eval_loss) {
            best = Some((k, p, report));
        }
    }
    let (best_k, best_params, best_report) = best.expect("sweep has at least one k");
    Ok(SweepOutcome {
        rows,
        best_k,
        best_params,
        best_report,
    })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
