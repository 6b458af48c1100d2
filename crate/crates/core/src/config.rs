//! Experiment configuration: a versioned JSON schema where every field has a
//! default, plus dotted-path overrides and a content hash that names run
//! artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentMode;
use crate::corpus::PoisonStrategy;
use crate::embedder::EmbedderKind;
use crate::error::{Error, Result};
use crate::optimizer::OptimizerConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    /// Sidecar vocabulary file; built from the corpus when absent.
    pub vocab: Option<PathBuf>,
    pub outcome_rules: PathBuf,
    pub synonyms: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            vocab: None,
            outcome_rules: "outcome_rules.json".into(),
            synonyms: None,
            output_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::MeanPool,
            dim: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_ratio: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub n: usize,
    pub max_iters: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n: 8,
            max_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub order: usize,
    pub alpha: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            order: 3,
            alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub mode: AgentMode,
    pub beta: f64,
    pub prior_strength: f64,
    pub gamma: f64,
    /// Overrides the pass rate in the outcome-rules file when set.
    pub safety_filter_pass_rate: Option<f64>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            mode: AgentMode::Deterministic,
            beta: 0.6,
            prior_strength: 0.95,
            gamma: 0.0,
            safety_filter_pass_rate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonConfig {
    pub count: usize,
    pub strategy: PoisonStrategy,
    pub target_action: String,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            count: 4,
            strategy: PoisonStrategy::AdversarialBackdoor,
            target_action: "halt".into(),
        }
    }
}

/// Scope of the synonym-rephrasing defense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RephraseScope {
    TriggerOnly,
    WholeQuery,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Benign-perplexity quantile for the filter threshold.
    pub quantile: f64,
    pub letter_count: usize,
    pub word_count: usize,
    pub rephrase_scope: RephraseScope,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            quantile: 0.95,
            letter_count: 3,
            word_count: 1,
            rephrase_scope: RephraseScope::TriggerOnly,
        }
    }
}

/// Named seeds; no other entropy source exists in the framework.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub optimizer: u64,
    pub agent: u64,
    pub defense: u64,
    pub metrics: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 7,
            optimizer: 17,
            agent: 23,
            defense: 29,
            metrics: 31,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub paths: PathsConfig,
    pub embedder: EmbedderConfig,
    /// Additional embedders for transfer experiments (sources and targets
    /// are `[embedder] + transfer_embedders`).
    pub transfer_embedders: Vec<EmbedderConfig>,
    pub split: SplitConfig,
    pub clusters: ClusterConfig,
    pub lm: LmConfig,
    pub agent: AgentConfig,
    pub retrieval: RetrievalConfig,
    pub poison: PoisonConfig,
    pub optimizer: OptimizerConfig,
    pub defense: DefenseConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            paths: PathsConfig::default(),
            embedder: EmbedderConfig::default(),
            transfer_embedders: Vec::new(),
            split: SplitConfig::default(),
            clusters: ClusterConfig::default(),
            lm: LmConfig::default(),
            agent: AgentConfig::default(),
            retrieval: RetrievalConfig::default(),
            poison: PoisonConfig::default(),
            optimizer: OptimizerConfig::default(),
            defense: DefenseConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl ExperimentConfig {
    /// Field-level range checks; file existence is checked at world build.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if !(0.0..=1.0).contains(&self.split.train_ratio) {
            problems.push("split.train_ratio: must be in [0,1]".into());
        }
        if self.clusters.n == 0 {
            problems.push("clusters.n: must be >= 1".into());
        }
        if self.lm.order == 0 {
            problems.push("lm.order: must be >= 1".into());
        }
        if self.lm.alpha <= 0.0 {
            problems.push("lm.alpha: must be > 0".into());
        }
        if !(self.agent.beta > 0.0 && self.agent.beta <= 1.0) {
            problems.push("agent.beta: must be in (0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.agent.prior_strength) {
            problems.push("agent.prior_strength: must be in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.agent.gamma) {
            problems.push("agent.gamma: must be in [0,1]".into());
        }
        if let Some(rate) = self.agent.safety_filter_pass_rate {
            if !(0.0..=1.0).contains(&rate) {
                problems.push("agent.safety_filter_pass_rate: must be in [0,1]".into());
            }
        }
        if self.retrieval.k == 0 {
            problems.push("retrieval.k: must be >= 1".into());
        }
        if self.poison.count == 0 {
            problems.push("poison.count: must be >= 1".into());
        }
        if self.poison.target_action.is_empty() {
            problems.push("poison.target_action: must be nonempty".into());
        }
        if !(0.0 < self.defense.quantile && self.defense.quantile <= 1.0) {
            problems.push("defense.quantile: must be in (0,1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Copy with the per-subsystem seeds pushed into nested configs.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.optimizer.seed = cfg.seeds.optimizer;
        cfg
    }

    /// Short content hash identifying a resolved configuration.
    pub fn hash(&self) -> String {
        // Round-tripping through Value sorts object keys, so the hash does
        // not depend on field declaration order.
        let value = serde_json::to_value(self.resolved()).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(12);
        for byte in digest.iter().take(6) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Loads a config file and applies `key.path=value` overrides.
pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let body = std::fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!("paths.config: cannot read {}: {e}", path.as_ref().display()))
    })?;
    let mut value: serde_json::Value =
        serde_json::from_str(&body).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config schema: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `dotted.path=json_or_string` override to a JSON tree.
pub fn apply_override(value: &mut serde_json::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} must look like key.path=value")))?;
    let leaf: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut node = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::Config(format!("override path {path:?} crosses a non-object")));
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), leaf);
            return Ok(());
        }
        node = map
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}
