//! Per-sample loss weights: inverse bin frequency (IPF), generalized Pareto
//! tail probability (EVT), and rectified gradient alignment (META).

use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample nonnegative loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    /// `true` for META batch weights (sum 0 or 1); `false` for static
    /// weights rescaled to mean 1 over the training set.
    pub normalized: bool,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        Self {
            values: vec![1.0; n],
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    /// Rescales static weights so their mean is exactly representable as 1.
    fn rescaled_to_mean_one(raw: Vec<f64>) -> Result<Self> {
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::Numeric(format!("cannot rescale weights with mean {mean}")));
        }
        Ok(Self {
            values: raw.into_iter().map(|w| w / mean).collect(),
            normalized: false,
        })
    }

    /// Writes `(origin, weight)` rows for auditing.
    pub fn write_csv(&self, path: &Path, origins: &[usize]) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["origin", "weight"])?;
        for (o, w) in origins.iter().zip(&self.values) {
            wtr.write_record([o.to_string(), w.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Equal-width histogram over the training aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// `1/n_j` for nonempty bins, 0 otherwise.
    pub bin_weights: Vec<f64>,
}

impl BinHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let b = self.bins();
        let lo = self.edges[0];
        let width = (self.edges[b] - lo) / b as f64;
        (((v - lo) / width).floor().max(0.0) as usize).min(b - 1)
    }

    pub fn raw_weight(&self, v: f64) -> f64 {
        self.bin_weights[self.bin_of(v)]
    }
}

pub const DEFAULT_BINS: usize = 20;

/// Inverse-frequency weights over `bins` equal-width bins, rescaled to mean 1.
pub fn ipf_weights(values: &[f64], bins: usize) -> Result<(BinHistogram, WeightVector)> {
    if values.is_empty() {
        return Err(Error::Degenerate("no samples to bin".into()));
    }
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Degenerate(
            "all targets identical; histogram collapses to one bin".into(),
        ));
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|j| lo + j as f64 * width).collect();
    edges.push(hi);
    let mut hist = BinHistogram {
        edges,
        counts: vec![0; bins],
        bin_weights: vec![0.0; bins],
    };
    let assigned: Vec<usize> = values.iter().map(|&v| hist.bin_of(v)).collect();
    for &b in &assigned {
        hist.counts[b] += 1;
    }
    for (w, &c) in hist.bin_weights.iter_mut().zip(&hist.counts) {
        if c > 0 {
            *w = 1.0 / c as f64;
        }
    }
    let raw = assigned.iter().map(|&b| hist.bin_weights[b]).collect();
    Ok((hist, WeightVector::rescaled_to_mean_one(raw)?))
}

const XI_ZERO: f64 = 1e-9;

/// Upper-tail probability `1 - G_ξ(z)` of the standardized GPD.
pub fn gpd_survival(z: f64, xi: f64) -> Result<f64> {
    if z < 0.0 || !z.is_finite() {
        return Err(Error::Domain(format!("GPD argument must be finite and >= 0, got {z}")));
    }
    if xi.abs() < XI_ZERO {
        return Ok((-z).exp());
    }
    let t = xi * z;
    if 1.0 + t <= 0.0 {
        return Err(Error::Domain(format!(
            "1 + ξz = {} is outside the support (ξ={xi}, z={z})",
            1.0 + t
        )));
    }
    Ok((-t.ln_1p() / xi).exp())
}

/// Standardized GPD CDF; the ξ = 0 case is the exponential `1 - e^{-z}`.
pub fn gpd_cdf(z: f64, xi: f64) -> Result<f64> {
    Ok(1.0 - gpd_survival(z, xi)?)
}

/// Maximum-likelihood GPD fit of the exceedances over `mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    /// Empirical exceedance fraction, the estimate of `1 - F(mu)`.
    pub p_tail: f64,
    pub log_likelihood: f64,
    pub n_exceedances: usize,
}

impl GpdFit {
    /// Right end of the support when ξ < 0.
    pub fn upper_bound(&self) -> Option<f64> {
        (self.xi < 0.0).then(|| self.mu - self.sigma / self.xi)
    }

    /// Estimated `1 - F(y)` for `y >= mu`.
    pub fn tail_probability(&self, y: f64) -> Result<f64> {
        Ok(self.p_tail * gpd_survival((y - self.mu) / self.sigma, self.xi)?)
    }
}

pub const MIN_EXCEEDANCES: usize = 5;
const XI_RANGE: (f64, f64) = (-0.5, 1.0);

fn neg_log_likelihood(z: &[f64], sigma: f64, xi: f64) -> f64 {
    if !(sigma > 0.0) || !(XI_RANGE.0..=XI_RANGE.1).contains(&xi) {
        return f64::INFINITY;
    }
    let n = z.len() as f64;
    if xi.abs() < XI_ZERO {
        return n * sigma.ln() + z.iter().sum::<f64>() / sigma;
    }
    let mut acc = 0.0;
    for &v in z {
        let t = xi * v / sigma;
        if 1.0 + t <= 0.0 {
            return f64::INFINITY;
        }
        acc += t.ln_1p();
    }
    n * sigma.ln() + (1.0 + 1.0 / xi) * acc
}

/// Nelder-Mead minimization in two dimensions. Returns the best vertex,
/// its value, and the iteration count, or `None` on budget exhaustion.
fn nelder_mead<F: Fn([f64; 2]) -> f64>(
    f: F,
    start: [f64; 2],
    step: [f64; 2],
    max_iter: usize,
) -> ([f64; 2], f64, Option<usize>) {
    let mut simplex = [
        start,
        [start[0] + step[0], start[1]],
        [start[0], start[1] + step[1]],
    ];
    let mut vals = simplex.map(&f);
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    for iter in 0..max_iter {
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.map(|i| simplex[i]);
        vals = order.map(|i| vals[i]);

        let spread = (vals[2] - vals[0]).abs();
        let size = simplex[1..]
            .iter()
            .map(|p| (p[0] - simplex[0][0]).abs().max((p[1] - simplex[0][1]).abs()))
            .fold(0.0, f64::max);
        if vals[0].is_finite() && spread <= 1e-12 * (1.0 + vals[0].abs()) && size < 1e-10 {
            return (simplex[0], vals[0], Some(iter));
        }

        let centroid = lerp(simplex[0], simplex[1], 0.5);
        let reflected = lerp(centroid, simplex[2], -1.0);
        let fr = f(reflected);
        if fr < vals[0] {
            let expanded = lerp(centroid, simplex[2], -2.0);
            let fe = f(expanded);
            if fe < fr {
                simplex[2] = expanded;
                vals[2] = fe;
            } else {
                simplex[2] = reflected;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            simplex[2] = reflected;
            vals[2] = fr;
        } else {
            let (toward, ft) = if fr < vals[2] {
                (lerp(centroid, reflected, 0.5), fr)
            } else {
                (lerp(centroid, simplex[2], 0.5), vals[2])
            };
            let fc = f(toward);
            if fc < ft {
                simplex[2] = toward;
                vals[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = lerp(simplex[0], simplex[i], 0.5);
                    vals[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best], vals[best], None)
}

/// Fits σ and ξ to the exceedances `y > mu` by maximum likelihood, starting
/// from the method-of-moments estimate. `training_size` is the number of
/// samples the exceedances were drawn from.
pub fn fit_gpd(exceedances: &[f64], mu: f64, training_size: usize) -> Result<GpdFit> {
    let n = exceedances.len();
    if n < MIN_EXCEEDANCES {
        return Err(Error::InsufficientTail {
            found: n,
            required: MIN_EXCEEDANCES,
        });
    }
    if training_size <= n {
        return Err(Error::Config(format!(
            "training size {training_size} must exceed the {n} exceedances"
        )));
    }
    if let Some(bad) = exceedances.iter().find(|&&y| !(y > mu) || !y.is_finite()) {
        return Err(Error::Domain(format!("value {bad} is not an exceedance of {mu}")));
    }
    let z: Vec<f64> = exceedances.iter().map(|y| y - mu).collect();
    let nf = n as f64;
    let mean = z.iter().sum::<f64>() / nf;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    if !(var > 0.0) {
        return Err(Error::Degenerate("all exceedances are equal".into()));
    }
    let zmax = z.iter().copied().fold(0.0, f64::max);

    let ratio = mean * mean / var;
    let xi0 = (0.5 * (1.0 - ratio)).clamp(XI_RANGE.0 + 0.05, XI_RANGE.1 - 0.05);
    let mut sigma0 = 0.5 * mean * (ratio + 1.0);
    if xi0 < 0.0 {
        sigma0 = sigma0.max(-xi0 * zmax * 1.01);
    }

    let objective = |p: [f64; 2]| neg_log_likelihood(&z, p[0].exp(), p[1]);
    let mut point = [sigma0.ln(), xi0];
    let mut value = objective(point);
    let mut converged = false;
    let mut iterations = 0;
    // restart from the incumbent: a collapsed simplex can stall short of the optimum
    for _ in 0..3 {
        let (p, v, it) = nelder_mead(objective, point, [0.1, 0.05], 5000);
        iterations += it.unwrap_or(5000);
        let improved = v < value - 1e-12 * (1.0 + value.abs());
        point = p;
        value = v;
        converged = it.is_some();
        if converged && !improved {
            break;
        }
    }
    if !converged || !value.is_finite() {
        return Err(Error::Fit(format!(
            "Nelder-Mead stopped after {iterations} iterations at sigma={}, xi={}, nll={value}",
            point[0].exp(),
            point[1]
        )));
    }
    Ok(GpdFit {
        mu,
        sigma: point[0].exp(),
        xi: point[1],
        p_tail: nf / training_size as f64,
        log_likelihood: -value,
        n_exceedances: n,
    })
}

/// Selects the values above `mu` and fits the tail to them.
pub fn fit_tail(values: &[f64], mu: f64) -> Result<GpdFit> {
    let exceedances: Vec<f64> = values.iter().copied().filter(|&v| v > mu).collect();
    fit_gpd(&exceedances, mu, values.len())
}

/// Raw EVT weights before rescaling: `1 / (1 - F(y))` in the tail, `c` below it.
pub fn evt_raw_weights(values: &[f64], fit: &GpdFit, c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("normal-sample weight c must be > 0, got {c}")));
    }
    let bound = fit.upper_bound();
    values
        .iter()
        .map(|&y| {
            if y < fit.mu {
                return Ok(c);
            }
            let y = match bound {
                Some(b) if y >= b => b - 1e-9,
                _ => y,
            };
            let w = 1.0 / fit.tail_probability(y)?;
            if w.is_finite() {
                Ok(w)
            } else {
                Err(Error::Numeric(format!("non-finite EVT weight at y={y}")))
            }
        })
        .collect()
}

/// EVT weights rescaled to mean 1 over `values`.
pub fn evt_weights(values: &[f64], fit: &GpdFit, c: f64) -> Result<WeightVector> {
    WeightVector::rescaled_to_mean_one(evt_raw_weights(values, fit, c)?)
}

/// Rectifies the alignment scores and normalizes them to sum to one; an
/// all-zero vector stays zero (the denominator falls back to 1).
pub fn normalize_alignment(dots: &[f64]) -> Result<WeightVector> {
    if let Some(bad) = dots.iter().find(|d| !d.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient alignment {bad}")));
    }
    let rectified: Vec<f64> = dots.iter().map(|&d| d.max(0.0)).collect();
    let total: f64 = rectified.iter().sum();
    let denom = total + if total == 0.0 { 1.0 } else { 0.0 };
    Ok(WeightVector {
        values: rectified.into_iter().map(|u| u / denom).collect(),
        normalized: true,
    })
}

/// META weights from per-example training gradients (rows of `train_grads`)
/// and the evaluation-loss gradient.
pub fn meta_weights(train_grads: ArrayView2<f64>, eval_grad: &[f64]) -> Result<WeightVector> {
    if train_grads.ncols() != eval_grad.len() {
        return Err(Error::Dimension(format!(
            "training gradients have {} entries, evaluation gradient {}",
            train_grads.ncols(),
            eval_grad.len()
        )));
    }
    let dots: Vec<f64> = train_grads
        .outer_iter()
        .map(|g| g.iter().zip(eval_grad).map(|(a, b)| a * b).sum())
        .collect();
    normalize_alignment(&dots)
}
