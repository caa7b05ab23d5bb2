//! Declarative run configuration: one JSON document whose defaults are the
//! reference protocol, plus dotted-path overrides and content hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tailcast::dataio::{CsvSchema, PrepareConfig};
use tailcast::eval::{EmbeddingSample, Subset};
use tailcast::finetune::{FreezeSpec, DEFAULT_SWEEP};
use tailcast::nn::{MlpSpec, DEFAULT_HIDDEN};
use tailcast::synth::SynthSpec;
use tailcast::train::TrainConfig;
use tailcast::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthSpec),
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden_widths: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_widths: DEFAULT_HIDDEN.to_vec(),
            dropout_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    #[serde(flatten)]
    pub freeze: FreezeSpec,
    /// Frozen-prefix sizes to try; the one with the lowest evaluation loss wins.
    pub sweep: Vec<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            freeze: FreezeSpec::default(),
            sweep: DEFAULT_SWEEP.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub subsets: Vec<Subset>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            subsets: vec![Subset::Extreme, Subset::Normal, Subset::All],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub prepare: PrepareConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub evaluate: EvaluateConfig,
    pub embeddings: EmbeddingSample,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            prepare: PrepareConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            evaluate: EvaluateConfig::default(),
            embeddings: EmbeddingSample::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Sets `path` (dot separated) inside `doc`. The value is parsed as JSON and
/// taken as a plain string when that fails.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("override `{key}` descends into a non-object")));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(map) => {
            map.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("override `{key}` descends into a non-object"))),
    }
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

impl RunConfig {
    /// Network shape implied by the windows this config produces.
    pub fn mlp_spec(&self, n_features: usize, n_targets: usize) -> MlpSpec {
        MlpSpec {
            input_dim: self.prepare.lookback * n_features,
            hidden_widths: self.network.hidden_widths.clone(),
            output_dim: self.prepare.horizon * n_targets,
            dropout_rate: self.network.dropout_rate,
        }
    }

    /// Feature and target counts known without reading any data.
    fn declared_dims(&self) -> (usize, usize) {
        match &self.data {
            DataSource::Synth(s) => (s.covariate_leads.len() + 1, 1),
            DataSource::Csv { schema, .. } => {
                let mut names = schema.features.clone();
                for t in &schema.targets {
                    if !names.contains(t) {
                        names.push(t.clone());
                    }
                }
                (names.len(), schema.targets.len())
            }
        }
    }

    /// Checks every module precondition that can be checked before any work.
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synth(s) => s.validate()?,
            DataSource::Csv { schema, .. } => {
                if schema.targets.is_empty() {
                    return Err(Error::Config("csv schema needs at least one target".into()));
                }
            }
        }
        let p = &self.prepare;
        if p.lookback == 0 || p.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be >= 1".into()));
        }
        if !(p.percentile > 0.0 && p.percentile < 100.0) {
            return Err(Error::Config(format!(
                "percentile must lie in (0, 100), got {}",
                p.percentile
            )));
        }
        p.fractions.validate()?;
        let (features, targets) = self.declared_dims();
        let spec = self.mlp_spec(features, targets);
        spec.validate()?;
        self.train.validate()?;
        let layers = spec.layer_count();
        let ks = if self.finetune.sweep.is_empty() {
            vec![self.finetune.freeze.frozen_prefix]
        } else {
            self.finetune.sweep.clone()
        };
        for k in ks {
            if k > layers {
                return Err(Error::Config(format!(
                    "cannot freeze {k} layers of a {layers}-layer network"
                )));
            }
        }
        if !(self.finetune.freeze.l2 >= 0.0) {
            return Err(Error::Config("finetune l2 must be >= 0".into()));
        }
        if self.evaluate.subsets.is_empty() {
            return Err(Error::Config("evaluate.subsets is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical config.
    pub fn content_hash(&self) -> String {
        hex::encode(&Sha256::digest(self.canonical_json().as_bytes())[..8])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.content_hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_protocol() {
        let c = load(None, &[]).unwrap();
        assert_eq!(c.prepare.lookback, 72);
        assert_eq!(c.prepare.horizon, 12);
        assert_eq!(c.prepare.percentile, 95.0);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.batch_size, 500);
        assert_eq!(c.train.patience, 50);
        assert_eq!(c.train.l2, 1e-6);
        assert_eq!(c.train.max_epochs, 1000);
        assert_eq!(c.finetune.freeze.max_epochs, 500);
        assert_eq!(c.network.hidden_widths, vec![128, 128, 64, 64, 32, 32, 16, 16]);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_set_nested_values() {
        let c = load(
            None,
            &[
                "train.strategy=meta".into(),
                "train.learning_rate=0.5".into(),
                "network.hidden_widths=[4,2]".into(),
                "data.synth.rho=0.3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.strategy, tailcast::train::Strategy::Meta);
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.network.hidden_widths, vec![4, 2]);
        match c.data {
            DataSource::Synth(s) => assert_eq!(s.rho, 0.3),
            _ => panic!("expected synth source"),
        }
    }

    #[test]
    fn malformed_overrides_rejected() {
        assert!(load(None, &["train.learning_rate".into()]).is_err());
        assert!(load(None, &["train..x=1".into()]).is_err());
        assert!(load(None, &["bogus=1".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_freeze_and_rho() {
        let c = load(None, &["network.hidden_widths=[8]".into()]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = load(None, &["data.synth.rho=1.2".into()]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = load(None, &[]).unwrap();
        let b = load(None, &["train.seed=0".into()]).unwrap();
        let c = load(None, &["train.seed=1".into()]).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash().len(), 16);
    }
}
