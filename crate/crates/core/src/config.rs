//! Project configuration (`crcal.json`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::ConflictRule;
use crate::calibration::{validate_registry, CalibrationOptions};
use crate::corpus::{FilterPolicy, DEFAULT_MAX_GAP_SECONDS, DEFAULT_THROTTLE, DEFAULT_WINDOW_CAP};
use crate::error::{Error, Result};
use crate::gateway::ChatEndpoint;

pub const DEFAULT_CONFIG_FILE: &str = "crcal.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub policy: FilterPolicy,
    #[serde(default = "default_throttle")]
    pub throttle: u8,
    #[serde(default)]
    pub scorer_a: Option<String>,
    #[serde(default)]
    pub scorer_b: Option<String>,
}

fn default_throttle() -> u8 {
    DEFAULT_THROTTLE
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            policy: FilterPolicy::Both,
            throttle: DEFAULT_THROTTLE,
            scorer_a: None,
            scorer_b: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatConfig {
    #[serde(default = "default_max_gap")]
    pub max_gap_seconds: i64,
    #[serde(default = "default_window_cap")]
    pub window_cap: usize,
}

fn default_max_gap() -> i64 {
    DEFAULT_MAX_GAP_SECONDS
}

fn default_window_cap() -> usize {
    DEFAULT_WINDOW_CAP
}

impl Default for ConcatConfig {
    fn default() -> Self {
        Self {
            max_gap_seconds: DEFAULT_MAX_GAP_SECONDS,
            window_cap: DEFAULT_WINDOW_CAP,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    #[serde(default)]
    pub seed: u64,
    /// Instruction template file; the built-in template is used when unset.
    #[serde(default)]
    pub template_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationConfig {
    #[serde(default)]
    pub conflict_rule: ConflictRule,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Environment variable holding the shared bearer token; no auth when unset.
    #[serde(default)]
    pub bearer_token_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    /// Filtered records (JSON Lines) that annotation rounds label.
    #[serde(default = "default_corpus")]
    pub corpus: PathBuf,
    #[serde(default)]
    pub endpoints: Vec<ChatEndpoint>,
    #[serde(default)]
    pub models: Vec<crate::calibration::ModelCard>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub concat: ConcatConfig,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default)]
    pub export: ExportConfig,
    #[serde(default)]
    pub annotation: AnnotationConfig,
    #[serde(default)]
    pub service: ServiceConfig,
}

fn default_corpus() -> PathBuf {
    PathBuf::from("corpus.jsonl")
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            corpus: default_corpus(),
            endpoints: Vec::new(),
            models: Vec::new(),
            filter: FilterConfig::default(),
            concat: ConcatConfig::default(),
            calibration: CalibrationOptions::default(),
            export: ExportConfig::default(),
            annotation: AnnotationConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for ep in &self.endpoints {
            ep.validate()?;
            if !names.insert(ep.name.as_str()) {
                return Err(Error::Config(format!("duplicate endpoint name {}", ep.name)));
            }
        }
        validate_registry(&self.models)?;
        for m in &self.models {
            if !names.contains(m.endpoint.as_str()) {
                return Err(Error::Config(format!(
                    "model {} refers to unknown endpoint {}",
                    m.name, m.endpoint
                )));
            }
        }
        for scorer in [&self.filter.scorer_a, &self.filter.scorer_b].into_iter().flatten() {
            if !names.contains(scorer.as_str()) {
                return Err(Error::Config(format!("unknown scoring endpoint {scorer}")));
            }
        }
        if self.filter.throttle > 10 {
            return Err(Error::Config(format!("throttle {} outside 0..=10", self.filter.throttle)));
        }
        if self.concat.max_gap_seconds < 0 {
            return Err(Error::Config("concat.max_gap_seconds must be >= 0".into()));
        }
        if self.calibration.epsilon.is_nan() || self.calibration.epsilon < 0.0 {
            return Err(Error::Config("calibration.epsilon must be >= 0".into()));
        }
        Ok(())
    }
}
