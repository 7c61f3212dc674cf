//! Run configuration file: one TOML document covering data generation, the
//! model, sweeps, preference fitting and the study plan.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gvqa_core::model::ModelConfig;
use gvqa_core::preference::FitOptions;
use gvqa_core::study::StudyPlan;
use gvqa_core::synth::GeneratorSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub validation: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 2000,
            validation: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub methods: Vec<String>,
    pub k: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            methods: ["AIMLE", "SIMPLE", "IMLE", "NONE"].map(String::from).to_vec(),
            k: vec![2, 3, 4, 5, 6],
            batch_sizes: vec![128],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: String,
    pub data: GeneratorSpec,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub sweep: SweepSpec,
    pub bt: FitOptions,
    pub study: StudyPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: "runs".into(),
            data: GeneratorSpec::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            sweep: SweepSpec::default(),
            bt: FitOptions::default(),
            study: StudyPlan::default(),
        }
    }
}

/// Dotted paths of keys in `given` that the schema `known` lacks.
fn unknown_keys(known: &toml::Table, given: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (known.get(key), value) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(k)), toml::Value::Table(g)) => unknown_keys(k, g, &path, out),
            _ => {}
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let given: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let known = toml::Table::try_from(RunConfig::default()).context("serializing the default config")?;
        let mut bad = Vec::new();
        unknown_keys(&known, &given, "", &mut bad);
        if !bad.is_empty() {
            bail!("unknown config keys: {}", bad.join(", "));
        }
        let cfg: RunConfig = toml::from_str(text).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.split.train == 0 {
            bail!("split.train must be positive");
        }
        if self.split.train + self.split.validation > self.data.num_examples {
            bail!(
                "split needs {} examples but data.num_examples is {}",
                self.split.train + self.split.validation,
                self.data.num_examples
            );
        }
        for m in &self.sweep.methods {
            gvqa_core::estimators::Method::parse(m)?;
        }
        if self.sweep.k.contains(&0) || self.sweep.batch_sizes.contains(&0) {
            bail!("sweep k and batch sizes must be positive");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        digest(self)
    }
}

pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(&Sha256::digest(&json)[..8])
}
