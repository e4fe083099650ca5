//! Training configuration.
//!
//! Stored as TOML. Unknown keys are errors, every field has a default, and
//! `key=value` overrides address nested fields with dots
//! (`ppo.clip_epsilon=0.1`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::RewardWeights;
use crate::peer_eval::MAX_NOISE_SIGMA;
use crate::rl_update::PpoConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How a draft is chosen among an agent's K candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Argmax of the learned reward model.
    #[default]
    RewardModel,
    /// Argmax of the mean peer scalar.
    PeerMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModelConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub steps_per_iteration: usize,
    /// Most recent executed (features, reward) pairs kept for training.
    pub replay_capacity: usize,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            learning_rate: 2.0,
            steps_per_iteration: 32,
            replay_capacity: 512,
        }
    }
}

/// Settings for the HTTP draft generator. Ignored unless `enabled`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSettings {
    pub enabled: bool,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "default".into(),
            timeout_secs: 30.0,
            max_retries: 2,
            max_in_flight: 4,
            api_key_env: "DRAFT_RL_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub num_agents: usize,
    pub drafts_per_query: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Worker threads for generation, evaluation and updates. 0 means one
    /// per core. Results do not depend on it.
    pub workers: usize,
    pub evaluator_noise: f64,
    /// Replace peer scores with a constant.
    pub constant_peer_scores: bool,
    pub selection: SelectionMode,
    /// Apply policy updates. Off reproduces a frozen policy.
    pub learn: bool,
    /// Train PPO only on executed drafts instead of all K.
    pub selected_only: bool,
    /// Sample with the concise step template and reject over-long steps.
    pub chain_of_draft: bool,
    /// Initial repulsion from candidates earlier drafts already chose.
    pub history_repulsion: f64,
    pub validation_every: usize,
    pub validation_threshold: f64,
    /// Validations without improvement before stopping. 0 disables.
    pub patience: usize,
    pub suite: PathBuf,
    pub val_suite: PathBuf,
    pub reward: RewardWeights,
    pub ppo: PpoConfig,
    pub reward_model: RewardModelConfig,
    pub backend: BackendSettings,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_agents: 3,
            drafts_per_query: 5,
            batch_size: 16,
            iterations: 300,
            seed: 42,
            workers: 0,
            evaluator_noise: 0.1,
            constant_peer_scores: false,
            selection: SelectionMode::RewardModel,
            learn: true,
            selected_only: false,
            chain_of_draft: true,
            history_repulsion: 0.5,
            validation_every: 25,
            validation_threshold: 0.8,
            patience: 3,
            suite: PathBuf::from("data/dev500.jsonl"),
            val_suite: PathBuf::from("data/val100.jsonl"),
            reward: RewardWeights::default(),
            ppo: PpoConfig::default(),
            reward_model: RewardModelConfig::default(),
            backend: BackendSettings::default(),
        }
    }
}

/// Named ablations of the full system.
pub const ABLATIONS: [&str; 6] = ["full", "no_drafts", "no_peer_eval", "no_reward_model", "no_cod", "no_rl"];

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.num_agents == 0 {
            return bad("num_agents must be >= 1");
        }
        if self.drafts_per_query == 0 {
            return bad("drafts_per_query must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.validation_every == 0 {
            return bad("validation_every must be >= 1");
        }
        if !(0.0..=MAX_NOISE_SIGMA).contains(&self.evaluator_noise) {
            return bad("evaluator_noise must be in [0, 0.5]");
        }
        if !self.history_repulsion.is_finite() || self.history_repulsion < 0.0 {
            return bad("history_repulsion must be >= 0");
        }
        let w = &self.reward;
        if w.answer < 0.0 || w.intermediate < 0.0 || (w.answer + w.intermediate - 1.0).abs() > 1e-9 {
            return bad("reward weights must be non-negative and sum to 1");
        }
        if self.reward_model.hidden == 0 || !(self.reward_model.learning_rate > 0.0) {
            return bad("reward_model.hidden must be >= 1 and learning_rate > 0");
        }
        if self.backend.enabled && !(self.backend.timeout_secs > 0.0) {
            return bad("backend.timeout_secs must be > 0");
        }
        self.ppo
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Applies one of [`ABLATIONS`] on top of `self`.
    pub fn with_ablation(mut self, name: &str) -> Result<Self, ConfigError> {
        match name {
            "full" => {}
            "no_drafts" => self.drafts_per_query = 1,
            "no_peer_eval" => self.constant_peer_scores = true,
            "no_reward_model" => self.selection = SelectionMode::PeerMean,
            "no_cod" => self.chain_of_draft = false,
            "no_rl" => self.learn = false,
            other => return Err(ConfigError::Invalid(format!("unknown ablation `{other}`"))),
        }
        Ok(self)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Canonical TOML: every field present, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Applies `key=value` overrides. Values are parsed as TOML, falling back
    /// to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("canonical TOML parses");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::BadOverride(raw.to_string()));
            }
            let value = parse_value(value.trim());
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("split yields at least one part");
            let mut table = &mut doc;
            for part in parts {
                table = table
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| ConfigError::Invalid(format!("`{part}` is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}
