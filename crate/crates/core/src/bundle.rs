//! Indexed graph bundles: canonical JSONL files plus a manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchor::ChunkVectors;
use crate::graph::{load_graph, GraphError, KnowledgeGraph};

pub const NODES_FILE: &str = "nodes.jsonl";
pub const EDGES_FILE: &str = "edges.jsonl";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub nodes: usize,
    pub edges: usize,
    pub chunks: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    /// sha256 over the three canonical files, in node/edge/chunk order.
    pub checksum: String,
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad manifest: {message}")]
    Manifest { path: String, message: String },
    #[error("bundle checksum mismatch: manifest {expected}, files {found}")]
    Checksum { expected: String, found: String },
    #[error("bundle has dimension {found}, configuration expects {expected}")]
    Dimension { expected: usize, found: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn checksum(dir: &Path) -> Result<String, BundleError> {
    let mut hasher = Sha256::new();
    for name in [NODES_FILE, EDGES_FILE, CHUNKS_FILE] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Validates the three input files and writes them, re-serialized in id
/// order, plus a manifest into `out`.
pub fn index(
    nodes: &Path,
    edges: &Path,
    chunks: &Path,
    dim: Option<usize>,
    out: &Path,
) -> Result<Manifest, BundleError> {
    let graph = load_graph(nodes, edges, chunks, dim)?;
    write_bundle(&graph, out)
}

pub fn write_bundle(graph: &KnowledgeGraph, out: &Path) -> Result<Manifest, BundleError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    graph.write_jsonl(out)?;
    let manifest = Manifest {
        nodes: graph.node_count(),
        edges: graph.edge_count(),
        chunks: graph.chunk_count(),
        dim: graph.dim(),
        checksum: checksum(out)?,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, BundleError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| BundleError::Manifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// A loaded bundle with its lazily embedded chunks.
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub graph: KnowledgeGraph,
    pub chunk_vectors: ChunkVectors,
}

impl Bundle {
    pub fn open(dir: &Path, dim: Option<usize>) -> Result<Self, BundleError> {
        let manifest = read_manifest(dir)?;
        if let Some(expected) = dim {
            if expected != manifest.dim {
                return Err(BundleError::Dimension {
                    expected,
                    found: manifest.dim,
                });
            }
        }
        let found = checksum(dir)?;
        if found != manifest.checksum {
            return Err(BundleError::Checksum {
                expected: manifest.checksum,
                found,
            });
        }
        let graph = load_graph(
            &dir.join(NODES_FILE),
            &dir.join(EDGES_FILE),
            &dir.join(CHUNKS_FILE),
            Some(manifest.dim),
        )?;
        let chunk_vectors = ChunkVectors::new(&graph);
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            graph,
            chunk_vectors,
        })
    }

    pub fn from_graph(graph: KnowledgeGraph) -> Self {
        let chunk_vectors = ChunkVectors::new(&graph);
        Self {
            dir: PathBuf::new(),
            manifest: Manifest {
                nodes: graph.node_count(),
                edges: graph.edge_count(),
                chunks: graph.chunk_count(),
                dim: graph.dim(),
                checksum: String::new(),
            },
            graph,
            chunk_vectors,
        }
    }
}
