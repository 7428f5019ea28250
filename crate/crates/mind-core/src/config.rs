//! Global run configuration: one JSON document with one section per
//! owning module, parsed strictly (unknown keys rejected) and validated
//! before anything consumes it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rectify::RectifyConfig;
use crate::rewards::RewardConfig;
use crate::runner::EpisodeConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Retrieval knobs. The same values appear inside the episode and reward
/// sections; validation requires the mirrors to agree so a config never
/// carries two effective values for one knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrbSection {
    pub k: usize,
    pub threshold: f64,
    pub alpha_sim: f64,
    pub alpha_qual: f64,
}

impl Default for PrbSection {
    fn default() -> Self {
        Self {
            k: 5,
            threshold: 0.70,
            alpha_sim: 0.5,
            alpha_qual: 0.5,
        }
    }
}

/// Backend selection. URLs left unset fall back to the MIND_CHAT_URL /
/// MIND_EMBED_URL environment variables; mock mode ignores both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsSection {
    pub mock: bool,
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
    pub embed_dims: usize,
    /// Remaining chat calls allowed per run; None is unlimited.
    pub call_budget: Option<u64>,
    pub inflight_cap: usize,
}

impl Default for ClientsSection {
    fn default() -> Self {
        Self {
            mock: true,
            chat_url: None,
            embed_url: None,
            chat_model: "mind-chat".to_string(),
            embed_model: "mind-embed".to_string(),
            embed_dims: 1024,
            call_budget: None,
            inflight_cap: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub bank: PathBuf,
    pub cases: PathBuf,
    pub output: PathBuf,
    /// Override for the shipped prior table.
    pub priors: Option<PathBuf>,
    /// Override for the shipped routing table.
    pub routing: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            bank: PathBuf::from("prb-bank.jsonl"),
            cases: PathBuf::from("cases.jsonl"),
            output: PathBuf::from("trajectories.jsonl"),
            priors: None,
            routing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub reward: RewardConfig,
    pub episode: EpisodeConfig,
    pub prb: PrbSection,
    pub rectify: RectifyConfig,
    pub clients: ClientsSection,
    pub paths: PathsSection,
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));

        if self.reward.s_max == 0 {
            return invalid("reward.s_max must be at least 1".to_string());
        }
        if self.reward.dims.is_empty() {
            return invalid("reward.dims must name at least one rubric dimension".to_string());
        }
        let weights = [
            ("reward.lambda_retr", self.reward.lambda_retr),
            ("reward.lambda_gain", self.reward.lambda_gain),
            ("reward.lambda_proc", self.reward.lambda_proc),
            ("reward.terminal_weight", self.reward.terminal_weight),
            ("reward.turn_weight", self.reward.turn_weight),
            ("reward.alpha_sim", self.reward.alpha_sim),
            ("reward.alpha_qual", self.reward.alpha_qual),
        ];
        for (name, value) in weights {
            if !value.is_finite() {
                return invalid(format!("{name} must be finite, got {value}"));
            }
        }
        for (kind, weight) in &self.reward.penalty_weights {
            if !weight.is_finite() || *weight < 0.0 {
                return invalid(format!(
                    "reward.penalty_weights.{} must be finite and non-negative, got {weight}",
                    kind.as_str()
                ));
            }
        }
        if self.reward.alpha_sim < 0.0 || self.reward.alpha_qual < 0.0 {
            return invalid("reward alpha weights must be non-negative".to_string());
        }

        self.episode
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("episode.{e}")))?;
        self.rectify
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("rectify.{e}")))?;

        if self.prb.k == 0 {
            return invalid("prb.k must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.prb.threshold) {
            return invalid(format!(
                "prb.threshold must lie in [0, 1], got {}",
                self.prb.threshold
            ));
        }
        for (name, alpha) in [
            ("prb.alpha_sim", self.prb.alpha_sim),
            ("prb.alpha_qual", self.prb.alpha_qual),
        ] {
            if !alpha.is_finite() || alpha < 0.0 {
                return invalid(format!("{name} must be finite and non-negative, got {alpha}"));
            }
        }

        if self.clients.inflight_cap == 0 {
            return invalid("clients.inflight_cap must be at least 1".to_string());
        }
        if self.clients.embed_dims == 0 {
            return invalid("clients.embed_dims must be at least 1".to_string());
        }
        if self.clients.chat_model.trim().is_empty() || self.clients.embed_model.trim().is_empty()
        {
            return invalid("clients model names must be non-empty".to_string());
        }

        for (name, path) in [
            ("paths.bank", &self.paths.bank),
            ("paths.cases", &self.paths.cases),
            ("paths.output", &self.paths.output),
        ] {
            if path.as_os_str().is_empty() {
                return invalid(format!("{name} must be non-empty"));
            }
        }

        // Mirrored knobs must agree; otherwise a run would read one value
        // for retrieval and another for rewards.
        let mirrors = [
            ("prb.k", self.prb.k as f64, "episode.top_k", self.episode.top_k as f64),
            (
                "prb.threshold",
                self.prb.threshold,
                "episode.gating_threshold",
                self.episode.gating_threshold,
            ),
            ("prb.alpha_sim", self.prb.alpha_sim, "reward.alpha_sim", self.reward.alpha_sim),
            (
                "prb.alpha_qual",
                self.prb.alpha_qual,
                "reward.alpha_qual",
                self.reward.alpha_qual,
            ),
        ];
        for (a_name, a, b_name, b) in mirrors {
            if a != b {
                return invalid(format!(
                    "{a_name} ({a}) and {b_name} ({b}) disagree; set both to the same value"
                ));
            }
        }
        Ok(())
    }

    /// Canonical pretty-printed form; `parse_config` of this text yields
    /// an equal config, and re-serializing is byte-stable.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}

pub fn parse_config(text: &str) -> Result<GlobalConfig, ConfigError> {
    let cfg: GlobalConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<GlobalConfig, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}
