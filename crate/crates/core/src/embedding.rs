//! Embedding providers for query, keyword and chunk strings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Map;
use sha2::{Digest, Sha256};

use crate::value::normalize;
use crate::wire::{WireClient, WireConfig, WireError};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("no precomputed embedding for `{0}`")]
    MissingKey(String),
    #[error("embedding for `{text}` has dimension {found}, expected {expected}")]
    Dimension {
        text: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding for `{0}` is zero or not finite")]
    Degenerate(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Unit vector of dimension [`dim`](Self::dim) for `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Provider selection as it appears in run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    PrecomputedFile { path: PathBuf },
    DeterministicTest { seed: u64 },
    ExternalService(WireConfig),
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::DeterministicTest { seed: 0 }
    }
}

pub fn build_provider(
    config: &ProviderConfig,
    dim: usize,
) -> Result<Box<dyn EmbeddingProvider>, EmbedError> {
    Ok(match config {
        ProviderConfig::PrecomputedFile { path } => {
            Box::new(PrecomputedEmbeddings::load(path, Some(dim))?)
        }
        ProviderConfig::DeterministicTest { seed } => {
            Box::new(DeterministicEmbedder::new(*seed, dim))
        }
        ProviderConfig::ExternalService(wire) => Box::new(ServiceEmbedder::new(wire.clone(), dim)?),
    })
}

/// Pseudorandom unit vectors derived from a stable hash of `(seed, text)`.
#[derive(Debug, Clone)]
pub struct DeterministicEmbedder {
    seed: u64,
    dim: usize,
}

impl DeterministicEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl EmbeddingProvider for DeterministicEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        loop {
            let v: Vec<f64> = (0..self.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            if let Some(unit) = normalize(v) {
                return Ok(unit);
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct PrecomputedLine {
    text: String,
    embedding: Vec<f64>,
}

/// Text → vector table read from a JSON-lines file.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn load(path: &Path, dim: Option<usize>) -> Result<Self, EmbedError> {
        let display = path.display().to_string();
        let mut table = HashMap::new();
        let mut dim = dim;
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PrecomputedLine =
                serde_json::from_str(&line).map_err(|e| EmbedError::Parse {
                    path: display.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            let expected = *dim.get_or_insert(rec.embedding.len());
            if rec.embedding.len() != expected {
                return Err(EmbedError::Dimension {
                    text: rec.text,
                    expected,
                    found: rec.embedding.len(),
                });
            }
            let unit = normalize(rec.embedding).ok_or(EmbedError::Degenerate(rec.text.clone()))?;
            table.insert(rec.text, unit);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            table,
        })
    }

    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        let table = pairs
            .into_iter()
            .filter_map(|(t, v)| normalize(v).map(|u| (t, u)))
            .collect();
        Self { dim, table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::MissingKey(text.to_string()))
    }
}

/// Remote embedder speaking `{"texts": [...]}` → `{"embeddings": [[...]]}`.
pub struct ServiceEmbedder {
    client: WireClient,
    dim: usize,
}

impl ServiceEmbedder {
    pub fn new(config: WireConfig, dim: usize) -> Result<Self, EmbedError> {
        Ok(Self {
            client: WireClient::new(config)?,
            dim,
        })
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let mut body = Map::new();
        body.insert("texts".into(), serde_json::json!(texts));
        let reply = self.client.call(body)?;
        let vectors: Vec<Vec<f64>> = reply
            .get("embeddings")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| WireError::Malformed("`embeddings` missing or not numeric".into()))?;
        if vectors.len() != texts.len() {
            return Err(WireError::Malformed(format!(
                "{} embeddings for {} texts",
                vectors.len(),
                texts.len()
            ))
            .into());
        }
        texts
            .iter()
            .zip(vectors)
            .map(|(t, v)| {
                if v.len() != self.dim {
                    return Err(EmbedError::Dimension {
                        text: t.to_string(),
                        expected: self.dim,
                        found: v.len(),
                    });
                }
                normalize(v).ok_or_else(|| EmbedError::Degenerate(t.to_string()))
            })
            .collect()
    }
}

impl EmbeddingProvider for ServiceEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn deterministic_provider_is_pure() {
        let p = DeterministicEmbedder::new(7, 16);
        let a = p.embed("Lothair II").unwrap();
        let b = p.embed("Lothair II").unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert_ne!(a, p.embed("Lothair I").unwrap());
        assert_ne!(
            a,
            DeterministicEmbedder::new(8, 16)
                .embed("Lothair II")
                .unwrap()
        );
        assert!(matches!(p.embed(""), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn precomputed_lookup_and_missing_key() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text": "Lothair II", "embedding": [3.0, 4.0]}}"#).unwrap();
        let p = PrecomputedEmbeddings::load(f.path(), Some(2)).unwrap();
        let v = p.embed("Lothair II").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        match p.embed("Charlemagne") {
            Err(EmbedError::MissingKey(t)) => assert_eq!(t, "Charlemagne"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn precomputed_dimension_enforced() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text": "x", "embedding": [1.0, 0.0, 0.0]}}"#).unwrap();
        assert!(matches!(
            PrecomputedEmbeddings::load(f.path(), Some(2)),
            Err(EmbedError::Dimension { .. })
        ));
    }
}
