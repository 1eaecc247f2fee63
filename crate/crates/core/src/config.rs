//! Run configuration, loaded from JSON and echoed into every report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{AgentKind, AgentSpec};
use crate::embedding::{EmbedderKind, EmbedderSpec};
use crate::flow::{ClassSet, SchemaMap};
use crate::library::DEFAULT_TAU;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// No retrieval, no induction.
    ZeroShot,
    /// Retrieval from a fixed library, no induction.
    LibraryOnly,
    /// Retrieval plus induction on every misclassification.
    Full,
}

impl AblationMode {
    pub fn retrieves(self) -> bool {
        self != AblationMode::ZeroShot
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::ZeroShot => "zero_shot",
            AblationMode::LibraryOnly => "library_only",
            AblationMode::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Flow CSV (optionally gzip-compressed).
    pub dataset: Option<PathBuf>,
    /// Split manifest written by `sample`; when absent the split is drawn from
    /// `quota_build`, `quota_eval` and `seed`.
    pub manifest: Option<PathBuf>,
    pub classes: ClassSet,
    pub schema_map: SchemaMap,
    pub embedder: EmbedderSpec,
    pub classifier: AgentSpec,
    pub inducer: AgentSpec,
    pub tau: f64,
    pub quota_build: u64,
    pub quota_eval: u64,
    pub seed: u64,
    pub mode: AblationMode,
    /// Flows per learning-curve point.
    pub curve_window: usize,
    /// Flows between library checkpoints during a build; 0 disables them.
    pub checkpoint_every: usize,
    pub library: PathBuf,
    pub output_dir: PathBuf,
    /// Per-stage latencies in outcomes. Off by default so reports stay reproducible.
    pub record_timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            manifest: None,
            classes: ClassSet::nf_bot_iot(),
            schema_map: SchemaMap::default(),
            embedder: EmbedderSpec::default(),
            classifier: AgentSpec::default(),
            inducer: AgentSpec::default(),
            tau: DEFAULT_TAU,
            quota_build: 50_000,
            quota_eval: 20_000,
            seed: 0,
            mode: AblationMode::Full,
            curve_window: 1000,
            checkpoint_every: 500,
            library: PathBuf::from("experience.lib"),
            output_dir: PathBuf::from("out"),
            record_timings: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(ConfigError::Invalid(format!("tau {} outside [-1, 1]", self.tau)));
        }
        if self.curve_window == 0 {
            return Err(ConfigError::Invalid("curve_window must be at least 1".into()));
        }
        for (role, spec) in [("classifier", &self.classifier), ("inducer", &self.inducer)] {
            spec.validate().map_err(|e| ConfigError::Invalid(format!("{role}: {e}")))?;
        }
        Ok(())
    }

    /// Mock agents and the hash embedder; no network access.
    pub fn make_offline(&mut self) {
        self.embedder.kind = EmbedderKind::Hash;
        for spec in [&mut self.classifier, &mut self.inducer] {
            spec.kind = AgentKind::Mock;
        }
    }

    pub fn is_offline(&self) -> bool {
        self.embedder.kind == EmbedderKind::Hash
            && self.classifier.kind == AgentKind::Mock
            && self.inducer.kind == AgentKind::Mock
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_json(r#"{"tau": 1.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"curve_window": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"classifier": {"temperature": 0.2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"classes": ["A", "a"]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn offline_switch() {
        let mut cfg = RunConfig::from_json(r#"{"embedder": {"kind": "remote"}, "classifier": {"kind": "remote_llm", "endpoint": "http://x"}}"#).unwrap();
        assert!(!cfg.is_offline());
        cfg.make_offline();
        assert!(cfg.is_offline());
    }
}
