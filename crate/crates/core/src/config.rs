//! Run configuration shared by the CLI, the service and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::ProviderConfig;
use crate::expand::{ExpandParams, DEFAULT_OFFER_CAP};
use crate::oracle::DEFAULT_N_MAX;
use crate::rank::RankParams;
use crate::reasoner::ReasonerConfig;

/// Total chunk budget per query, split between pre-retrieval and the final
/// context.
pub const CHUNK_BUDGET: usize = 15;
pub const FINAL_CHUNK_FLOOR: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Expansion budget: maximum number of collision candidates.
    #[serde(rename = "B", alias = "budget")]
    pub budget: usize,
    /// Localization hops.
    #[serde(rename = "h", alias = "hops")]
    pub hops: usize,
    /// Reasoning-expansion depth.
    #[serde(rename = "d", alias = "depth")]
    pub depth: usize,
    pub alpha: f64,
    pub top_n: usize,
    pub k_chunks: usize,
    pub k_per_keyword: usize,
    pub chunk_budget: usize,
    pub epsilon: f64,
    pub intra_group_penalty: f64,
    pub include_edge_cost: bool,
    pub offer_cap: usize,
    pub max_expansion_elements: Option<usize>,
    pub n_max: usize,
    /// Embedding dimension; taken from the bundle manifest when absent.
    #[serde(rename = "D", alias = "dim")]
    pub dim: Option<usize>,
    pub seed: u64,
    pub provider: ProviderConfig,
    pub reasoner: ReasonerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            budget: 10,
            hops: 6,
            depth: 6,
            alpha: 1.0,
            top_n: 3,
            k_chunks: 5,
            k_per_keyword: 10,
            chunk_budget: CHUNK_BUDGET,
            epsilon: 1e-9,
            intra_group_penalty: 1.5,
            include_edge_cost: false,
            offer_cap: DEFAULT_OFFER_CAP,
            max_expansion_elements: None,
            n_max: DEFAULT_N_MAX,
            dim: None,
            seed: 0,
            provider: ProviderConfig::default(),
            reasoner: ReasonerConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl RunConfig {
    /// Reads a JSON config and resolves relative provider/fixture paths
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::from_json(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self =
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
                path: "<config>".into(),
                message: format!("{}: {}", e.path(), e.inner()),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ProviderConfig::PrecomputedFile { path } = &mut self.provider {
            fix(path);
        }
        if let ReasonerConfig::Mock {
            fixtures: Some(path),
        } = &mut self.reasoner
        {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.budget == 0 {
            return Err(ConfigError::Invalid("B must be at least 1".into()));
        }
        if self.k_per_keyword == 0 {
            return Err(ConfigError::Invalid(
                "k_per_keyword must be at least 1".into(),
            ));
        }
        if self.dim == Some(0) {
            return Err(ConfigError::Invalid("D must be positive".into()));
        }
        self.rank_params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn rank_params(&self) -> RankParams {
        RankParams {
            alpha: self.alpha,
            epsilon: self.epsilon,
            top_n: self.top_n,
            intra_group_penalty: self.intra_group_penalty,
            include_edges: self.include_edge_cost,
        }
    }

    pub fn expand_params(&self) -> ExpandParams {
        ExpandParams {
            depth: self.depth,
            offer_cap: self.offer_cap,
            max_elements: self.max_expansion_elements,
        }
    }

    /// Chunks left for the final context after pre-retrieval spent `spent`.
    pub fn final_chunk_budget(&self, spent: usize) -> usize {
        self.chunk_budget
            .saturating_sub(spent)
            .max(FINAL_CHUNK_FLOOR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!((c.budget, c.hops, c.depth, c.alpha), (10, 6, 6, 1.0));
        assert_eq!(c.final_chunk_budget(5), 10);
        assert_eq!(c.final_chunk_budget(14), 5);
    }

    #[test]
    fn short_and_long_names() {
        let c = RunConfig::from_json(r#"{"B": 4, "hops": 2, "d": 1, "alpha": 5.0}"#).unwrap();
        assert_eq!((c.budget, c.hops, c.depth, c.alpha), (4, 2, 1, 5.0));
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["B"], 4);
    }

    #[test]
    fn unknown_field_names_path() {
        let err = RunConfig::from_json(r#"{"betta": 1}"#).unwrap_err();
        assert!(err.to_string().contains("betta"), "{err}");
        assert!(RunConfig::from_json(r#"{"B": 0}"#).is_err());
    }

    #[test]
    fn relative_paths_resolved() {
        let mut c = RunConfig::from_json(
            r#"{"provider": {"kind": "precomputed_file", "path": "emb.jsonl"},
                "reasoner": {"kind": "mock", "fixtures": "fx.jsonl"}}"#,
        )
        .unwrap();
        c.resolve_paths(Path::new("/data/b"));
        assert_eq!(
            c.provider,
            ProviderConfig::PrecomputedFile {
                path: "/data/b/emb.jsonl".into()
            }
        );
    }
}
