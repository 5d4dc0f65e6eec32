//! Experiment configuration, read from TOML.
//!
//! Sections mirror the library types one to one, and unknown keys are
//! rejected everywhere. Any section `seed` left unset inherits the top-level
//! `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SubsetSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::influence::{LissaConfig, Method, RankMode};
use crate::textmodel::{EncoderConfig, Head, Verbalizer};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// HHD-style JSONL corpus; the synthetic generator is used when absent.
    pub corpus: Option<PathBuf>,
    /// Keyword list file, one per line; overrides `subset.keywords`.
    pub keywords: Option<PathBuf>,
    pub min_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            keywords: None,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub mask_fraction: f64,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mask_fraction: 0.15,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub shots: Vec<usize>,
    /// Runs per shot count, seeded `seed, seed + 1, ...`.
    pub repeats: usize,
    /// Training settings for few-shot runs; `[train]` when absent.
    pub train: Option<TrainConfig>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            shots: vec![16, 32, 64, 128],
            repeats: 5,
            train: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceConfig {
    pub method: Method,
    pub mode: RankMode,
    /// Test examples analysed, split evenly between the two classes.
    pub n_test: usize,
    pub ks: Vec<usize>,
    pub histogram_k: usize,
    pub bin_width: f64,
    /// Train the analysed model on a class-balanced sample of this size
    /// instead of the full training split.
    pub shots: Option<usize>,
    /// Parameter groups the influence is taken over; the trained groups
    /// when absent.
    pub trainable: Option<Vec<String>>,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            method: Method::Lissa,
            mode: RankMode::Helpful,
            n_test: 50,
            ks: vec![10, 30, 50],
            histogram_k: 30,
            bin_width: 0.5,
            shots: None,
            trainable: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LooConfig {
    /// Size of the class-balanced training sample used for retraining.
    pub train_size: usize,
    pub n_test: usize,
    /// Head-only training with Newton's method and weight decay equal to
    /// the influence damping; `[train]` settings otherwise.
    pub convex: bool,
    /// Influence method for the sweep; `influence.method` when absent.
    pub method: Option<Method>,
}

impl Default for LooConfig {
    fn default() -> Self {
        Self {
            train_size: 32,
            n_test: 1,
            convex: true,
            method: None,
        }
    }
}

/// LOO retraining is restricted to training sets at most this large.
pub const LOO_MAX_TRAIN: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub heads: Vec<Head>,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub subset: SubsetSpec,
    pub encoder: EncoderConfig,
    pub verbalizer: Verbalizer,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub fewshot: FewShotConfig,
    pub influence: InfluenceConfig,
    pub lissa: LissaConfig,
    pub loo: LooConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            heads: vec![Head::Classifier, Head::Verbalizer],
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            subset: SubsetSpec::default(),
            encoder: EncoderConfig::default(),
            verbalizer: Verbalizer::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            fewshot: FewShotConfig::default(),
            influence: InfluenceConfig::default(),
            lissa: LissaConfig::default(),
            loo: LooConfig::default(),
        }
    }
}

// Tables (as key paths) whose `seed` falls back to the top-level seed.
const SEEDED: &[&[&str]] = &[
    &["synthetic"],
    &["subset"],
    &["pretrain", "train"],
    &["train"],
    &["fewshot", "train"],
    &["lissa"],
];

impl Config {
    /// Parses TOML, filling unset section seeds from `seed` (or from
    /// `seed_override` when given).
    pub fn from_toml(text: &str, seed_override: Option<u64>) -> Result<Config> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(seed) = seed_override {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let seed = match table.get("seed") {
            None => 0,
            Some(toml::Value::Integer(s)) if *s >= 0 => *s,
            Some(other) => return Err(Error::Config(format!("seed must be a non-negative integer, got {other}"))),
        };
        for path in SEEDED {
            let optional = path[0] == "fewshot";
            let mut cursor = &mut table;
            let mut present = true;
            for key in *path {
                if !cursor.contains_key(*key) {
                    if optional {
                        present = false;
                        break;
                    }
                    cursor.insert(key.to_string(), toml::Value::Table(toml::Table::new()));
                }
                cursor = match cursor.get_mut(*key) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(Error::Config(format!("`{}` must be a table", path.join(".")))),
                };
            }
            if present && !cursor.contains_key("seed") {
                cursor.insert("seed".into(), toml::Value::Integer(seed));
            }
        }
        let config: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, seed_override)
    }

    /// Every section resolved from defaults alone, seeded with `seed`.
    pub fn with_seed(seed: u64) -> Config {
        Self::from_toml("", Some(seed)).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |e: Error| Error::Config(e.to_string());
        if self.heads.is_empty() {
            return Err(Error::Config("heads must not be empty".into()));
        }
        self.synthetic.validate().map_err(bad)?;
        self.subset.validate().map_err(bad)?;
        self.encoder.validate().map_err(bad)?;
        self.pretrain.train.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        if let Some(t) = &self.fewshot.train {
            t.validate().map_err(bad)?;
        }
        self.lissa.validate().map_err(bad)?;
        if !(self.pretrain.mask_fraction > 0.0 && self.pretrain.mask_fraction < 1.0) {
            return Err(Error::Config("pretrain.mask_fraction must lie in (0, 1)".into()));
        }
        if self.influence.n_test < 2 {
            return Err(Error::Config("influence.n_test must be at least 2".into()));
        }
        if self.influence.ks.contains(&0) || self.influence.histogram_k == 0 {
            return Err(Error::Config("influence ks must be positive".into()));
        }
        if !(self.influence.bin_width > 0.0) {
            return Err(Error::Config("influence.bin_width must be positive".into()));
        }
        if self.loo.train_size < 3 || self.loo.train_size > LOO_MAX_TRAIN {
            return Err(Error::Config(format!("loo.train_size must lie in [3, {LOO_MAX_TRAIN}]")));
        }
        if self.loo.n_test == 0 {
            return Err(Error::Config("loo.n_test must be positive".into()));
        }
        Ok(())
    }

    pub fn fewshot_train(&self) -> &TrainConfig {
        self.fewshot.train.as_ref().unwrap_or(&self.train)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
