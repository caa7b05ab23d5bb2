//! Raw-unit error metrics on window subsets and last-hidden-layer export.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{to_batch, Normalizer, WindowSample};
use crate::error::{Error, Result};
use crate::nn::{hidden_embeddings, predict, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    #[default]
    Extreme,
    Normal,
    All,
}

impl Subset {
    pub fn admits(&self, w: &WindowSample) -> bool {
        match self {
            Subset::Extreme => w.extreme,
            Subset::Normal => !w.extreme,
            Subset::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based horizon step.
    pub step: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub mae: f64,
    pub rmse: f64,
    pub per_step: Vec<StepMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subset: Subset,
    pub windows: usize,
    pub values: usize,
    pub mae: f64,
    pub rmse: f64,
    pub per_step: Vec<StepMetrics>,
    pub per_target: Vec<TargetMetrics>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    abs: f64,
    sq: f64,
    n: usize,
}

impl Accum {
    fn add(&mut self, e: f64) {
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
    }

    fn finish(&self) -> (f64, f64) {
        let n = self.n as f64;
        let mae = self.abs / n;
        // power-mean inequality; max() only absorbs last-bit rounding
        let rmse = (self.sq / n).sqrt().max(mae);
        (mae, rmse)
    }
}

/// MAE and RMSE of a list of errors.
pub fn error_metrics(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::EmptySubset("no errors to score".into()));
    }
    let mut a = Accum::default();
    errors.iter().for_each(|&e| a.add(e));
    Ok(a.finish())
}

/// Denormalizes predictions and targets of the windows admitted by `subset`
/// and scores them over every (window, step, target) triple.
pub fn score(
    params: &ParamSet,
    windows: &[WindowSample],
    normalizer: &Normalizer,
    subset: Subset,
) -> Result<MetricsReport> {
    let chosen: Vec<&WindowSample> = windows.iter().filter(|w| subset.admits(w)).collect();
    if chosen.is_empty() {
        return Err(Error::EmptySubset(format!("no {subset:?} windows to score")));
    }
    let horizon = chosen[0].horizon();
    let n_targets = chosen[0].y.ncols();
    if n_targets != normalizer.target_indices.len() {
        return Err(Error::Dimension(format!(
            "windows have {n_targets} targets, normalizer {}",
            normalizer.target_indices.len()
        )));
    }
    let batch = to_batch(&chosen);
    let pred = predict(params, batch.x.view())?;
    if pred.dim() != batch.y.dim() {
        return Err(Error::Dimension(format!(
            "model predicts {:?}, windows hold {:?}",
            pred.dim(),
            batch.y.dim()
        )));
    }
    let mut total = Accum::default();
    let mut by_step = vec![Accum::default(); horizon];
    let mut by_target = vec![Accum::default(); n_targets];
    let mut by_both = vec![vec![Accum::default(); horizon]; n_targets];
    for (p_row, y_row) in pred.outer_iter().zip(batch.y.outer_iter()) {
        for s in 0..horizon {
            for k in 0..n_targets {
                let j = s * n_targets + k;
                let e = normalizer.inverse_target(k, p_row[j]) - normalizer.inverse_target(k, y_row[j]);
                total.add(e);
                by_step[s].add(e);
                by_target[k].add(e);
                by_both[k][s].add(e);
            }
        }
    }
    let steps = |acc: &[Accum]| {
        acc.iter()
            .enumerate()
            .map(|(s, a)| {
                let (mae, rmse) = a.finish();
                StepMetrics { step: s + 1, mae, rmse }
            })
            .collect::<Vec<_>>()
    };
    let (mae, rmse) = total.finish();
    Ok(MetricsReport {
        subset,
        windows: chosen.len(),
        values: total.n,
        mae,
        rmse,
        per_step: steps(&by_step),
        per_target: (0..n_targets)
            .map(|k| {
                let (mae, rmse) = by_target[k].finish();
                TargetMetrics {
                    target: normalizer.feature_names[normalizer.target_indices[k]].clone(),
                    mae,
                    rmse,
                    per_step: steps(&by_both[k]),
                }
            })
            .collect(),
    })
}

/// How many windows of each class to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSample {
    pub extreme: usize,
    pub normal: usize,
    pub seed: u64,
}

impl Default for EmbeddingSample {
    fn default() -> Self {
        Self {
            extreme: 50,
            normal: 50,
            seed: 0,
        }
    }
}

/// Writes `origin,class,e0..` rows for a seeded sample of extreme and normal
/// windows, extremes first. Returns the number of rows written.
pub fn export_embeddings(
    params: &ParamSet,
    windows: &[WindowSample],
    sample: &EmbeddingSample,
    path: &Path,
) -> Result<usize> {
    if params.layer_count() < 2 {
        return Err(Error::Config("network has no hidden layer to export".into()));
    }
    let width = params.layers[params.layer_count() - 2].bias.len();
    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
    let mut pick = |extreme: bool, want: usize| {
        let pool: Vec<&WindowSample> = windows.iter().filter(|w| w.extreme == extreme).collect();
        if want > pool.len() {
            warn!(
                "requested {want} {} windows, only {} available",
                if extreme { "extreme" } else { "normal" },
                pool.len()
            );
        }
        pool.choose_multiple(&mut rng, want.min(pool.len()))
            .copied()
            .collect::<Vec<_>>()
    };
    let chosen: Vec<&WindowSample> = pick(true, sample.extreme)
        .into_iter()
        .chain(pick(false, sample.normal))
        .collect();

    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["origin".to_string(), "class".to_string()];
    header.extend((0..width).map(|j| format!("e{j}")));
    wtr.write_record(&header)?;
    if !chosen.is_empty() {
        let emb = hidden_embeddings(params, to_batch(&chosen).x.view())?;
        for (w, row) in chosen.iter().zip(emb.outer_iter()) {
            let mut rec = vec![
                w.origin.to_string(),
                if w.extreme { "extreme" } else { "normal" }.to_string(),
            ];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(chosen.len())
}
