//! SGD training with static (IPF/EVT) or meta-learned per-sample weights,
//! early stopping on the extreme evaluation set, and an empirical check of
//! the monotone-descent guarantee of the meta step.

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{percentile, to_batch, SplitResult, WindowSample};
use crate::error::{Error, Result};
use crate::nn::{
    apply_update, forward, l2_penalty_grad, mean_grad, per_example_dots, per_example_loss,
    weighted_grad, Batch, MlpSpec, Mode, ParamSet, TrainableMask,
};
use crate::reweight::{
    evt_weights, fit_tail, ipf_weights, normalize_alignment, BinHistogram, GpdFit, WeightVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Unweighted,
    Ipf,
    Evt,
    Meta,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Unweighted => "unweighted",
            Strategy::Ipf => "ipf",
            Strategy::Evt => "evt",
            Strategy::Meta => "meta",
        }
    }
}

/// Which training windows enter the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSubset {
    #[default]
    Both,
    NormalOnly,
    ExtremeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub learning_rate: f64,
    /// Step size of the meta update; `learning_rate` when unset. Meta weights
    /// sum to one per batch, so the weighted mean gradient is about `1/n` the
    /// size of the uniform one.
    pub meta_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2: f64,
    pub seed: u64,
    pub training_subset: TrainingSubset,
    pub ipf_bins: usize,
    /// Raw EVT weight of samples below the tail threshold.
    pub evt_c: f64,
    /// Percentile defining the EVT tail threshold when `tail_threshold` is unset.
    pub extreme_percentile: f64,
    pub tail_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Unweighted,
            learning_rate: 1e-4,
            meta_learning_rate: None,
            batch_size: 500,
            eval_batch_size: 500,
            max_epochs: 1000,
            patience: 50,
            l2: 1e-6,
            seed: 0,
            training_subset: TrainingSubset::Both,
            ipf_bins: crate::reweight::DEFAULT_BINS,
            evt_c: 1.0,
            extreme_percentile: 95.0,
            tail_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(lr) = self.meta_learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "meta learning rate must be finite and >= 0, got {lr}"
                )));
            }
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if !(self.evt_c > 0.0) {
            return Err(Error::Config(format!("evt_c must be > 0, got {}", self.evt_c)));
        }
        if self.ipf_bins < 2 {
            return Err(Error::Config("ipf_bins must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

/// Summary of the weights applied to one mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchWeightStats {
    pub epoch: usize,
    pub batch: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub sum: f64,
    pub zero_fraction: f64,
}

impl BatchWeightStats {
    fn of(epoch: usize, batch: usize, w: &[f64]) -> Self {
        let n = w.len() as f64;
        let sum: f64 = w.iter().sum();
        Self {
            epoch,
            batch,
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            mean: sum / n,
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            sum,
            zero_fraction: w.iter().filter(|&&v| v == 0.0).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: Strategy,
    pub training_subset: TrainingSubset,
    pub pool_size: usize,
    /// Which windows early stopping watched.
    pub monitored: String,
    pub epochs: Vec<EpochRecord>,
    /// 0 means the starting parameters were never beaten.
    pub best_epoch: usize,
    pub best_eval_loss: f64,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub static_weight_mean: Option<f64>,
    pub gpd_fit: Option<GpdFit>,
    pub ipf_histogram: Option<BinHistogram>,
    pub dropout_policy: String,
    pub checkpoint: Option<String>,
    pub weight_stats: Vec<BatchWeightStats>,
}

impl TrainReport {
    pub fn write_weight_stats_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        for s in &self.weight_stats {
            wtr.serialize(s)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Mixes a run seed with stream identifiers into an independent seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = h.wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        h ^= h >> 30;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// `θ ← θ − lr · grad` on trainable entries; rejects non-finite gradients.
pub fn sgd_step(
    params: &mut ParamSet,
    grad: &[f64],
    lr: f64,
    mask: &TrainableMask,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries, network has {}",
            grad.len(),
            params.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { epoch, batch });
    }
    apply_update(params, grad, lr, mask);
    Ok(())
}

fn add_l2(grad: &mut [f64], params: &ParamSet, l2: f64, mask: &TrainableMask) {
    if l2 > 0.0 {
        for (g, r) in grad.iter_mut().zip(l2_penalty_grad(params, l2, mask)) {
            *g += r;
        }
    }
}

/// Unweighted inference-mode MSE averaged over samples.
pub fn mean_loss(params: &ParamSet, batch: &Batch) -> Result<f64> {
    let trace = forward(params, batch.x.view(), Mode::Infer, 0.0)?;
    let losses = per_example_loss(&trace, batch.y.view())?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, epoch as u64])));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One pass over `pool` in seeded random mini-batches with fixed per-sample
/// weights. Returns the mean weighted training loss.
#[allow(clippy::too_many_arguments)]
pub fn weighted_epoch(
    params: &mut ParamSet,
    spec: &MlpSpec,
    pool: &[&WindowSample],
    weights: &[f64],
    config: &TrainConfig,
    mask: &TrainableMask,
    epoch: usize,
    stats: &mut Vec<BatchWeightStats>,
) -> Result<f64> {
    if weights.len() != pool.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} samples",
            weights.len(),
            pool.len()
        )));
    }
    let mut total = 0.0;
    for (b, idx) in shuffled_batches(pool.len(), config.batch_size, config.seed, epoch)
        .into_iter()
        .enumerate()
    {
        let members: Vec<&WindowSample> = idx.iter().map(|&i| pool[i]).collect();
        let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        let batch = to_batch(&members);
        let mode = Mode::Train {
            seed: derive_seed(config.seed, &[2, epoch as u64, b as u64]),
        };
        let trace = forward(params, batch.x.view(), mode, spec.dropout_rate)?;
        let losses = per_example_loss(&trace, batch.y.view())?;
        total += losses.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>();
        let mut grad = weighted_grad(params, &trace, batch.y.view(), &w)?;
        add_l2(&mut grad, params, config.l2, mask);
        sgd_step(params, &grad, config.learning_rate, mask, epoch, b)?;
        stats.push(BatchWeightStats::of(epoch, b, &w));
    }
    Ok(total / pool.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaStep {
    pub weights: WeightVector,
    /// Unweighted training-batch loss before the update.
    pub train_loss: f64,
    /// Evaluation-batch loss before the update.
    pub eval_loss: f64,
}

/// One meta-reweighting step.
///
/// With the weights initialized at zero the inner look-ahead step leaves the
/// parameters where they are, so the evaluation gradient is taken at the
/// current parameters. Each training sample's weight is its rectified
/// gradient alignment with that evaluation gradient, normalized over the
/// batch; the parameters then take one SGD step on the weighted loss plus L2.
/// Both forward passes share one dropout mask per unit, drawn from
/// `dropout_seed`. Frozen layers do not enter the alignment.
pub fn meta_train_step(
    params: &mut ParamSet,
    spec: &MlpSpec,
    train: &Batch,
    eval: &Batch,
    config: &TrainConfig,
    mask: &TrainableMask,
    dropout_seed: u64,
) -> Result<MetaStep> {
    if eval.is_empty() {
        return Err(Error::StrategyUnavailable(
            "meta reweighting needs a nonempty extreme evaluation batch".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptySubset("empty training batch".into()));
    }
    let mode = Mode::TrainShared { seed: dropout_seed };
    let train_trace = forward(params, train.x.view(), mode, spec.dropout_rate)?;
    let eval_trace = forward(params, eval.x.view(), mode, spec.dropout_rate)?;
    let mut eval_grad = mean_grad(params, &eval_trace, eval.y.view())?;
    mask.apply(params, &mut eval_grad);
    let dots = per_example_dots(params, &train_trace, train.y.view(), &eval_grad)?;
    let weights = normalize_alignment(&dots)?;

    let train_losses = per_example_loss(&train_trace, train.y.view())?;
    let eval_losses = per_example_loss(&eval_trace, eval.y.view())?;

    let mut grad = weighted_grad(params, &train_trace, train.y.view(), &weights.values)?;
    add_l2(&mut grad, params, config.l2, mask);
    let lr = config.meta_learning_rate.unwrap_or(config.learning_rate);
    sgd_step(params, &grad, lr, mask, 0, 0)?;
    Ok(MetaStep {
        weights,
        train_loss: train_losses.iter().sum::<f64>() / train_losses.len() as f64,
        eval_loss: eval_losses.iter().sum::<f64>() / eval_losses.len() as f64,
    })
}

fn sample_eval_indices(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if m >= n {
        if m == n {
            return (0..n).collect();
        }
        return (0..m).map(|_| rng.gen_range(0..n)).collect();
    }
    rand::seq::index::sample(rng, n, m).into_vec()
}

/// Training windows admitted by `subset`.
pub fn training_pool(split: &SplitResult, subset: TrainingSubset) -> Vec<&WindowSample> {
    split
        .train
        .iter()
        .filter(|w| match subset {
            TrainingSubset::Both => true,
            TrainingSubset::NormalOnly => !w.extreme,
            TrainingSubset::ExtremeOnly => w.extreme,
        })
        .collect()
}

/// Static weights for the pool plus the fitted model behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticWeights {
    pub weights: WeightVector,
    pub gpd_fit: Option<GpdFit>,
    pub histogram: Option<BinHistogram>,
}

/// IPF/EVT/uniform weights over `pool`. The EVT tail is fitted on the full
/// training split so that it describes the training distribution even when
/// the pool is a subset.
pub fn static_weights(
    pool: &[&WindowSample],
    split: &SplitResult,
    config: &TrainConfig,
) -> Result<StaticWeights> {
    let peaks: Vec<f64> = pool.iter().map(|w| w.peak).collect();
    match config.strategy {
        Strategy::Unweighted | Strategy::Meta => Ok(StaticWeights {
            weights: WeightVector::uniform(pool.len()),
            gpd_fit: None,
            histogram: None,
        }),
        Strategy::Ipf => {
            let (hist, weights) = ipf_weights(&peaks, config.ipf_bins)?;
            Ok(StaticWeights {
                weights,
                gpd_fit: None,
                histogram: Some(hist),
            })
        }
        Strategy::Evt => {
            let all: Vec<f64> = split.train.iter().map(|w| w.peak).collect();
            if all.is_empty() {
                return Err(Error::EmptySubset("no training windows".into()));
            }
            let mu = config
                .tail_threshold
                .unwrap_or_else(|| percentile(&all, config.extreme_percentile));
            let fit = fit_tail(&all, mu)?;
            let weights = evt_weights(&peaks, &fit, config.evt_c)?;
            Ok(StaticWeights {
                weights,
                gpd_fit: Some(fit),
                histogram: None,
            })
        }
    }
}

/// Extra knobs used by fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub mask: TrainableMask,
    /// Count the starting parameters as a candidate for the best model.
    pub include_initial: bool,
}

/// Trains from `init` until early stopping and returns the parameters with
/// the lowest extreme-evaluation loss.
pub fn fit(
    init: ParamSet,
    spec: &MlpSpec,
    split: &SplitResult,
    config: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    let options = FitOptions {
        mask: TrainableMask::all(init.layer_count()),
        include_initial: false,
    };
    fit_with(init, spec, split, config, &options)
}

pub fn fit_with(
    init: ParamSet,
    spec: &MlpSpec,
    split: &SplitResult,
    config: &TrainConfig,
    options: &FitOptions,
) -> Result<(ParamSet, TrainReport)> {
    config.validate()?;
    spec.validate()?;
    let pool = training_pool(split, config.training_subset);
    if pool.is_empty() {
        return Err(Error::EmptySubset(format!(
            "no training windows for subset {:?}",
            config.training_subset
        )));
    }
    let (monitor_windows, monitored) = if !split.eval_extreme.is_empty() {
        (&split.eval_extreme, "eval_extreme")
    } else if config.strategy == Strategy::Meta {
        return Err(Error::StrategyUnavailable(
            "meta reweighting needs extreme windows in the validation split".into(),
        ));
    } else if !split.validation.is_empty() {
        warn!("no extreme validation windows; early stopping watches the full validation split");
        (&split.validation, "validation")
    } else {
        return Err(Error::EmptySubset("validation split is empty".into()));
    };
    let monitor = to_batch(&monitor_windows.iter().collect::<Vec<_>>());
    let eval_pool: Vec<&WindowSample> = split.eval_extreme.iter().collect();

    let statics = static_weights(&pool, split, config)?;
    let mut report = TrainReport {
        strategy: config.strategy,
        training_subset: config.training_subset,
        pool_size: pool.len(),
        monitored: monitored.to_string(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_eval_loss: f64::INFINITY,
        stopped_epoch: 0,
        early_stopped: false,
        static_weight_mean: (config.strategy != Strategy::Meta).then(|| statics.weights.mean()),
        gpd_fit: statics.gpd_fit.clone(),
        ipf_histogram: statics.histogram.clone(),
        dropout_policy: match config.strategy {
            Strategy::Meta => "one mask per unit shared by the training and evaluation batches of a step",
            _ => "independent mask per sample",
        }
        .to_string(),
        checkpoint: None,
        weight_stats: Vec::new(),
    };

    let mask = &options.mask;
    let mut params = init;
    let mut best = params.clone();
    if options.include_initial {
        report.best_eval_loss = mean_loss(&params, &monitor)?;
    }
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let train_loss = match config.strategy {
            Strategy::Meta => meta_epoch(&mut params, spec, &pool, &eval_pool, config, mask, epoch, &mut report.weight_stats)?,
            _ => weighted_epoch(
                &mut params,
                spec,
                &pool,
                &statics.weights.values,
                config,
                mask,
                epoch,
                &mut report.weight_stats,
            )?,
        };
        let eval_loss = mean_loss(&params, &monitor)?;
        if !eval_loss.is_finite() {
            return Err(Error::Numeric(format!("evaluation loss is {eval_loss} after epoch {epoch}")));
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            eval_loss,
        });
        report.stopped_epoch = epoch;
        if eval_loss < report.best_eval_loss {
            report.best_eval_loss = eval_loss;
            report.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                report.early_stopped = true;
                break;
            }
        }
    }
    Ok((best, report))
}

#[allow(clippy::too_many_arguments)]
fn meta_epoch(
    params: &mut ParamSet,
    spec: &MlpSpec,
    pool: &[&WindowSample],
    eval_pool: &[&WindowSample],
    config: &TrainConfig,
    mask: &TrainableMask,
    epoch: usize,
    stats: &mut Vec<BatchWeightStats>,
) -> Result<f64> {
    let mut total = 0.0;
    for (b, idx) in shuffled_batches(pool.len(), config.batch_size, config.seed, epoch)
        .into_iter()
        .enumerate()
    {
        let members: Vec<&WindowSample> = idx.iter().map(|&i| pool[i]).collect();
        let train = to_batch(&members);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[3, epoch as u64, b as u64]));
        let eval_idx = sample_eval_indices(eval_pool.len(), config.eval_batch_size, &mut rng);
        let eval = to_batch(&eval_idx.iter().map(|&i| eval_pool[i]).collect::<Vec<_>>());
        let dropout_seed = derive_seed(config.seed, &[2, epoch as u64, b as u64]);
        let step = meta_train_step(params, spec, &train, &eval, config, mask, dropout_seed)
            .map_err(|e| match e {
                Error::Divergence { .. } => Error::Divergence { epoch, batch: b },
                other => other,
            })?;
        total += step.train_loss * idx.len() as f64;
        stats.push(BatchWeightStats::of(epoch, b, &step.weights.values));
    }
    Ok(total / pool.len() as f64)
}

/// Noise-free linear regression problem on which the meta step's
/// monotone-descent guarantee can be checked.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticToy {
    pub spec: MlpSpec,
    pub train: Batch,
    pub eval: Batch,
    pub optimum: ParamSet,
    pub start: ParamSet,
}

impl QuadraticToy {
    pub fn random(seed: u64, dim: usize, n_train: usize, n_eval: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec {
            input_dim: dim,
            hidden_widths: vec![],
            output_dim: 1,
            dropout_rate: 0.0,
        };
        let theta: Vec<f64> = (0..=dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let optimum = ParamSet::unflatten(&spec, &theta).expect("toy shape");
        let mut draw = |n: usize| {
            let x = Array2::from_shape_simple_fn((n, dim), || rng.gen_range(-1.0..1.0));
            let y = x.dot(&optimum.layers[0].weights) + &optimum.layers[0].bias;
            Batch { x, y }
        };
        let train = draw(n_train);
        let eval = draw(n_eval);
        Self {
            start: ParamSet::zeros(&spec),
            spec,
            train,
            eval,
            optimum,
        }
    }

    /// Largest eigenvalue of the evaluation-loss Hessian `(2/M) Σ x̃ x̃ᵀ`,
    /// with `x̃ = [x; 1]`.
    pub fn lipschitz(&self) -> f64 {
        let m = self.eval.len();
        let d = self.spec.input_dim + 1;
        let mut h = Array2::<f64>::zeros((d, d));
        for row in self.eval.x.outer_iter() {
            let xt: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
            for a in 0..d {
                for b in 0..d {
                    h[[a, b]] += 2.0 * xt[a] * xt[b] / m as f64;
                }
            }
        }
        largest_eigenvalue(&h)
    }

    /// Largest per-example gradient norm found by sweeping the ball around
    /// the optimum that contains the starting point.
    pub fn gradient_bound(&self, sweep: usize, seed: u64) -> f64 {
        let star = self.optimum.flatten();
        let start = self.start.flatten();
        let radius = star
            .iter()
            .zip(&start)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let mut candidates = vec![start.clone()];
        // directions along each training input attain the per-sample maximum
        for row in self.train.x.outer_iter() {
            let xt: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
            let norm = xt.iter().map(|v| v * v).sum::<f64>().sqrt();
            for sign in [-1.0, 1.0] {
                candidates.push(star.iter().zip(&xt).map(|(s, x)| s + sign * radius * x / norm).collect());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..sweep {
            let dir: Vec<f64> = (0..star.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            candidates.push(star.iter().zip(&dir).map(|(s, u)| s + radius * u / norm).collect());
        }
        let mut bound = 0.0f64;
        for theta in candidates {
            let p = ParamSet::unflatten(&self.spec, &theta).expect("toy shape");
            let trace = forward(&p, self.train.x.view(), Mode::Infer, 0.0).expect("toy forward");
            let grads = crate::nn::per_example_grads(&p, &trace, self.train.y.view()).expect("toy grads");
            for g in grads.outer_iter() {
                bound = bound.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        bound
    }

    /// Largest learning rate covered by the descent guarantee, `2n / (L σ²)`.
    pub fn step_bound(&self, sigma: f64) -> f64 {
        2.0 * self.train.len() as f64 / (self.lipschitz() * sigma * sigma)
    }
}

fn largest_eigenvalue(h: &Array2<f64>) -> f64 {
    let d = h.nrows();
    let mut v = ndarray::Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let next = h.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let updated = &next / norm;
        let rayleigh = updated.dot(&h.dot(&updated));
        let done = (rayleigh - lambda).abs() <= 1e-15 * rayleigh.abs();
        v = updated;
        lambda = rayleigh;
        if done {
            break;
        }
    }
    lambda
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub learning_rate: f64,
    pub lipschitz: f64,
    pub gradient_bound: f64,
    pub step_bound: f64,
    /// Full evaluation loss before the first step and after each step.
    pub losses: Vec<f64>,
    pub max_increase: f64,
    pub violations: usize,
    pub pass: bool,
}

pub const MONOTONE_SLACK: f64 = 1e-12;

/// Runs `steps` full-batch meta steps on the toy and checks that the full
/// evaluation loss never rises by more than [`MONOTONE_SLACK`].
pub fn lemma_monotonicity_harness(toy: &QuadraticToy, learning_rate: f64, steps: usize) -> Result<HarnessReport> {
    let sigma = toy.gradient_bound(256, 0);
    let config = TrainConfig {
        strategy: Strategy::Meta,
        learning_rate,
        l2: 0.0,
        batch_size: toy.train.len(),
        eval_batch_size: toy.eval.len(),
        ..TrainConfig::default()
    };
    let mask = TrainableMask::all(toy.spec.layer_count());
    let mut params = toy.start.clone();
    let mut losses = vec![mean_loss(&params, &toy.eval)?];
    for _ in 0..steps {
        if meta_train_step(&mut params, &toy.spec, &toy.train, &toy.eval, &config, &mask, 0).is_err() {
            losses.push(f64::INFINITY);
            break;
        }
        let loss = mean_loss(&params, &toy.eval)?;
        losses.push(if loss.is_finite() { loss } else { f64::INFINITY });
        if !loss.is_finite() {
            break;
        }
    }
    let increases: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    let max_increase = increases.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let violations = increases.iter().filter(|&&d| !(d <= MONOTONE_SLACK)).count();
    Ok(HarnessReport {
        learning_rate,
        lipschitz: toy.lipschitz(),
        gradient_bound: sigma,
        step_bound: toy.step_bound(sigma),
        losses,
        max_increase,
        violations,
        pass: violations == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use ndarray::array;

    fn linear_spec(dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim: dim,
            hidden_widths: vec![],
            output_dim: 1,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn sgd_step_cases() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![],
            output_dim: 1,
            dropout_rate: 0.0,
        };
        let mut p = ParamSet::unflatten(&spec, &[1.0, 0.0]).unwrap();
        let all = TrainableMask::all(1);
        sgd_step(&mut p, &[2.0, 0.0], 0.1, &all, 0, 0).unwrap();
        assert!((p.flatten()[0] - 0.8).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut p, &[0.0, 0.0], 0.1, &all, 0, 0).unwrap();
        assert_eq!(p, before);
        let frozen = TrainableMask { layers: vec![false] };
        sgd_step(&mut p, &[5.0, 5.0], 0.1, &frozen, 0, 0).unwrap();
        assert_eq!(p, before);
        assert!(matches!(
            sgd_step(&mut p, &[f64::NAN, 0.0], 0.1, &all, 3, 7),
            Err(Error::Divergence { epoch: 3, batch: 7 })
        ));
    }

    fn toy_windows(n: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = Array2::from_shape_simple_fn((2, 2), || rng.gen_range(0.0..1.0));
                let y = array![[x[[1, 0]] * 0.7 + 0.1], [x[[0, 1]] * 0.3]];
                WindowSample {
                    x,
                    y,
                    origin: i,
                    extreme: i % 5 == 0,
                    peak: i as f64,
                }
            })
            .collect()
    }

    fn small_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 4,
            hidden_widths: vec![6, 4],
            output_dim: 2,
            dropout_rate: 0.1,
        }
    }

    fn run_epoch(weights: &[f64], lr: f64, l2: f64) -> ParamSet {
        let ws = toy_windows(40, 1);
        let pool: Vec<&WindowSample> = ws.iter().collect();
        let spec = small_spec();
        let mut p = init_params(&spec, 3);
        let config = TrainConfig {
            learning_rate: lr,
            batch_size: 8,
            l2,
            ..TrainConfig::default()
        };
        let mask = TrainableMask::all(3);
        let mut stats = Vec::new();
        for epoch in 1..=3 {
            weighted_epoch(&mut p, &spec, &pool, weights, &config, &mask, epoch, &mut stats).unwrap();
        }
        p
    }

    #[test]
    fn doubling_weights_with_half_rate_is_identical() {
        let a = run_epoch(&[1.0; 40], 0.05, 0.0).flatten();
        let b = run_epoch(&[2.0; 40], 0.025, 0.0).flatten();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_weights_only_shrink() {
        let spec = small_spec();
        let start = init_params(&spec, 3);
        let p = run_epoch(&[0.0; 40], 0.05, 0.0);
        assert_eq!(p, start);
        let shrunk = run_epoch(&[0.0; 40], 0.05, 0.1);
        for (l0, l1) in start.layers.iter().zip(&shrunk.layers) {
            assert_eq!(l0.bias, l1.bias);
            for (a, b) in l0.weights.iter().zip(l1.weights.iter()) {
                assert!(b.abs() <= a.abs());
            }
        }
    }

    #[test]
    fn meta_step_orthogonal_gradients_leave_params() {
        // train inputs only touch coordinate 0, eval only coordinate 1; the
        // shared bias is zeroed out by targets that already match on it
        let spec = linear_spec(2);
        let mut p = ParamSet::unflatten(&spec, &[0.0, 0.0, 0.0]).unwrap();
        let train = Batch {
            x: array![[1.0, 0.0], [-1.0, 0.0]],
            y: array![[1.0], [-1.0]],
        };
        let eval = Batch {
            x: array![[0.0, 1.0], [0.0, -1.0]],
            y: array![[1.0], [-1.0]],
        };
        let config = TrainConfig {
            learning_rate: 0.1,
            l2: 0.0,
            ..TrainConfig::default()
        };
        let before = p.clone();
        let step = meta_train_step(&mut p, &spec, &train, &eval, &config, &TrainableMask::all(1), 0).unwrap();
        assert_eq!(step.weights.values, vec![0.0, 0.0]);
        assert_eq!(p, before);
    }

    #[test]
    fn meta_step_single_aligned_sample_is_plain_sgd() {
        let spec = linear_spec(2);
        let start = ParamSet::unflatten(&spec, &[0.2, -0.1, 0.05]).unwrap();
        let train = Batch {
            x: array![[1.0, 0.5]],
            y: array![[2.0]],
        };
        let eval = Batch {
            x: array![[0.8, 0.4], [1.0, 1.0]],
            y: array![[1.5], [1.0]],
        };
        let config = TrainConfig {
            learning_rate: 0.1,
            l2: 1e-3,
            ..TrainConfig::default()
        };
        let mask = TrainableMask::all(1);
        let mut meta = start.clone();
        let step = meta_train_step(&mut meta, &spec, &train, &eval, &config, &mask, 0).unwrap();
        assert_eq!(step.weights.values, vec![1.0]);

        let mut plain = start.clone();
        let trace = forward(&plain, train.x.view(), Mode::Infer, 0.0).unwrap();
        let mut g = mean_grad(&plain, &trace, train.y.view()).unwrap();
        add_l2(&mut g, &plain, 1e-3, &mask);
        sgd_step(&mut plain, &g, 0.1, &mask, 0, 0).unwrap();
        assert_eq!(meta, plain);
    }

    #[test]
    fn meta_step_requires_eval_batch() {
        let spec = linear_spec(1);
        let mut p = ParamSet::zeros(&spec);
        let train = Batch {
            x: array![[1.0]],
            y: array![[1.0]],
        };
        let eval = Batch {
            x: Array2::zeros((0, 1)),
            y: Array2::zeros((0, 1)),
        };
        let r = meta_train_step(&mut p, &spec, &train, &eval, &TrainConfig::default(), &TrainableMask::all(1), 0);
        assert!(matches!(r, Err(Error::StrategyUnavailable(_))));
    }

    #[test]
    fn harness_zero_rate_is_flat() {
        let toy = QuadraticToy::random(1, 3, 16, 8);
        let r = lemma_monotonicity_harness(&toy, 0.0, 20).unwrap();
        assert!(r.pass);
        assert!(r.losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn harness_huge_rate_reports_violations() {
        let toy = QuadraticToy::random(2, 3, 16, 8);
        let sigma = toy.gradient_bound(256, 0);
        let r = lemma_monotonicity_harness(&toy, 100.0 * toy.step_bound(sigma), 100).unwrap();
        assert!(!r.pass);
        assert!(r.violations > 0);
    }

    #[test]
    fn lipschitz_matches_closed_form_on_axis_data() {
        // x̃ ∈ {[1,0,1],[0,1,1]}: H = [[1,0,1],[0,1,1],[1,1,2]] with λmax = 3
        let toy = QuadraticToy {
            spec: linear_spec(2),
            train: Batch {
                x: array![[1.0, 0.0]],
                y: array![[0.0]],
            },
            eval: Batch {
                x: array![[1.0, 0.0], [0.0, 1.0]],
                y: array![[0.0], [0.0]],
            },
            optimum: ParamSet::zeros(&linear_spec(2)),
            start: ParamSet::zeros(&linear_spec(2)),
        };
        assert!((toy.lipschitz() - 3.0).abs() < 1e-9);
    }
}
