//! Seeded AR(1) series with generalized-Pareto spikes and leading covariates.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::TimeSeriesFrame;
use crate::error::{Error, Result};

/// 2020-01-01T00:00:00Z in epoch hours.
pub const DEFAULT_START_HOUR: i64 = 438_288;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub length: usize,
    pub rho: f64,
    /// Standard deviation of the Gaussian innovation.
    pub noise: f64,
    /// Per-step probability of a spike.
    pub spike_prob: f64,
    pub spike_sigma: f64,
    pub spike_xi: f64,
    /// One covariate per entry: a noisy copy of the target this many steps ahead.
    pub covariate_leads: Vec<usize>,
    pub covariate_noise: f64,
    /// Replace the first covariate by the bare spike impulses (led the same
    /// way), so that extremes can be labeled on a covariate.
    pub covariate_spikes: bool,
    pub z0: f64,
    pub start_hour: i64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 20_000,
            rho: 0.9,
            noise: 0.1,
            spike_prob: 0.02,
            spike_sigma: 1.0,
            spike_xi: 0.2,
            covariate_leads: vec![12, 6],
            covariate_noise: 0.05,
            covariate_spikes: false,
            z0: 0.0,
            start_hour: DEFAULT_START_HOUR,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Config(format!(
                "AR coefficient must satisfy |rho| < 1 for a stable series, got {}",
                self.rho
            )));
        }
        if self.length == 0 {
            return Err(Error::Config("length must be >= 1".into()));
        }
        if !(self.noise >= 0.0 && self.covariate_noise >= 0.0) {
            return Err(Error::Config("noise scales must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.spike_prob) {
            return Err(Error::Config(format!(
                "spike_prob must lie in [0, 1], got {}",
                self.spike_prob
            )));
        }
        if !(self.spike_sigma > 0.0) || !(self.spike_xi < 1.0 && self.spike_xi.is_finite()) {
            return Err(Error::Config(format!(
                "spike GPD needs sigma > 0 and xi < 1, got ({}, {})",
                self.spike_sigma, self.spike_xi
            )));
        }
        if self.covariate_spikes && self.covariate_leads.is_empty() {
            return Err(Error::Config("covariate_spikes needs at least one covariate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    /// Row of the target at which the spike enters.
    pub index: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub frame: TimeSeriesFrame,
    pub spikes: Vec<Spike>,
}

/// Inverse-CDF draw from GPD(0, sigma, xi).
pub fn sample_gpd(rng: &mut impl Rng, sigma: f64, xi: f64) -> f64 {
    let u: f64 = rng.gen();
    if xi.abs() < 1e-12 {
        -sigma * (-u).ln_1p()
    } else {
        sigma / xi * ((1.0 - u).powf(-xi) - 1.0)
    }
}

/// `z[t+1] = rho z[t] + noise e[t+1] + spike[t+1]`; covariate `j` at row `t`
/// observes `z[t + lead_j]` plus noise. Columns are `c0.., y`.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let max_lead = spec.covariate_leads.iter().copied().max().unwrap_or(0);
    let total = spec.length + max_lead;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut z = vec![0.0; total];
    let mut impulse = vec![0.0; total];
    let mut spikes = Vec::new();
    z[0] = spec.z0;
    for t in 1..total {
        let e: f64 = rng.sample(StandardNormal);
        let mut next = spec.rho * z[t - 1] + spec.noise * e;
        if spec.spike_prob > 0.0 && rng.gen::<f64>() < spec.spike_prob {
            let m = sample_gpd(&mut rng, spec.spike_sigma, spec.spike_xi);
            next += m;
            impulse[t] = m;
            if t < spec.length {
                spikes.push(Spike { index: t, magnitude: m });
            }
        }
        z[t] = next;
    }

    let d = spec.covariate_leads.len() + 1;
    let mut values = Array2::zeros((spec.length, d));
    for (j, &lead) in spec.covariate_leads.iter().enumerate() {
        let source = if spec.covariate_spikes && j == 0 { &impulse } else { &z };
        for t in 0..spec.length {
            let e: f64 = rng.sample(StandardNormal);
            values[[t, j]] = source[t + lead] + spec.covariate_noise * e;
        }
    }
    for t in 0..spec.length {
        values[[t, d - 1]] = z[t];
    }
    let mut names: Vec<String> = (0..d - 1).map(|j| format!("c{j}")).collect();
    names.push("y".into());
    let timestamps = (0..spec.length as i64).map(|t| spec.start_hour + t).collect();
    let frame = TimeSeriesFrame::new(timestamps, values, names, vec![d - 1])?;
    Ok(SynthOutput { frame, spikes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{prepare, PrepareConfig};
    use crate::reweight::fit_gpd;

    #[test]
    fn noiseless_ar_is_geometric() {
        let spec = SynthSpec {
            length: 6,
            rho: 0.5,
            noise: 0.0,
            spike_prob: 0.0,
            z0: 1.0,
            covariate_leads: vec![],
            ..SynthSpec::default()
        };
        let out = generate(&spec).unwrap();
        let y: Vec<f64> = out.frame.column(0).to_vec();
        assert_eq!(y, vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]);
        assert!(out.spikes.is_empty());
    }

    #[test]
    fn unstable_rho_rejected() {
        for rho in [1.0, -1.0, 1.5] {
            let spec = SynthSpec { rho, ..SynthSpec::default() };
            assert!(matches!(generate(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn same_seed_same_frame() {
        let spec = SynthSpec { length: 500, ..SynthSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.spikes, b.spikes);
        let c = generate(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.frame, c.frame);
    }

    #[test]
    fn covariates_lead_the_target() {
        let spec = SynthSpec {
            length: 200,
            covariate_leads: vec![4],
            covariate_noise: 0.0,
            ..SynthSpec::default()
        };
        let f = generate(&spec).unwrap().frame;
        for t in 0..196 {
            assert_eq!(f.values()[[t, 0]], f.values()[[t + 4, 1]]);
        }
    }

    #[test]
    fn extreme_fraction_near_five_percent() {
        let spec = SynthSpec {
            spike_prob: 0.05,
            ..SynthSpec::default()
        };
        let out = generate(&spec).unwrap();
        let prepared = prepare(&out.frame, &PrepareConfig::default()).unwrap();
        let s = &prepared.split;
        let all: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        let frac = all.iter().filter(|w| w.extreme).count() as f64 / all.len() as f64;
        assert!((frac - 0.05).abs() <= 0.01, "extreme fraction {frac}");
    }

    #[test]
    fn spike_magnitudes_are_gpd() {
        let spec = SynthSpec {
            length: 200_000,
            spike_prob: 0.05,
            spike_sigma: 2.0,
            spike_xi: 0.2,
            covariate_leads: vec![],
            ..SynthSpec::default()
        };
        let out = generate(&spec).unwrap();
        let m: Vec<f64> = out.spikes.iter().map(|s| s.magnitude).collect();
        let fit = fit_gpd(&m, 0.0, spec.length).unwrap();
        assert!((fit.xi - 0.2).abs() <= 0.1, "xi {}", fit.xi);
        assert!((fit.sigma - 2.0).abs() <= 0.2, "sigma {}", fit.sigma);
    }
}
