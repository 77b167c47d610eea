//! Immutable knowledge-graph store.
//!
//! Nodes, edges and chunks are held in dense vectors sorted by their string
//! identifier, so index order and identifier order coincide. Edges are
//! traversed as undirected; `src`/`dst` only record provenance.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::value::cosine;

/// Dense index of a node, ordered like the node identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeIdx(pub u32);

/// Dense index of an edge, ordered like the edge identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeIdx(pub u32);

/// Dense index of a text chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkIdx(pub u32);

impl NodeIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl EdgeIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ChunkIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A node or an edge. Anchor sets and subgraphs range over both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ElementRef {
    Node(NodeIdx),
    Edge(EdgeIdx),
}

/// Which element kinds a similarity lookup scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Nodes,
    Edges,
    Both,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("edge `{edge}` references missing node `{node}`")]
    DanglingEndpoint { edge: String, node: String },
    #[error("`{element}` references missing chunk `{chunk}`")]
    DanglingChunk { element: String, chunk: String },
    #[error("`{element}` has an unusable embedding (norm {norm})")]
    BadEmbedding { element: String, norm: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("chunk `{0}` has empty text")]
    EmptyChunk(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown element `{0}`")]
    UnknownElement(String),
}

/// One line of `nodes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLine {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub description: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub chunks: Vec<String>,
}

/// One line of `edges.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLine {
    pub id: String,
    pub src: String,
    pub dst: String,
    pub relation: String,
    #[serde(default)]
    pub text: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub chunks: Vec<String>,
}

/// One line of `chunks.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkLine {
    pub id: String,
    pub doc: String,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub id: String,
    pub label: String,
    pub description: String,
    pub embedding: Vec<f64>,
    pub chunk_refs: Vec<ChunkIdx>,
}

#[derive(Debug, Clone)]
pub struct EdgeRecord {
    pub id: String,
    pub src: NodeIdx,
    pub dst: NodeIdx,
    pub relation: String,
    /// Text of the whole triple, e.g. "A born_in B".
    pub combined_text: String,
    pub embedding: Vec<f64>,
    pub chunk_refs: Vec<ChunkIdx>,
}

impl EdgeRecord {
    /// The endpoint across from `v`. A self-loop returns `v`.
    pub fn opposite(&self, v: NodeIdx) -> NodeIdx {
        if self.src == v {
            self.dst
        } else {
            self.src
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub id: String,
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    dim: usize,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    chunks: Vec<ChunkRecord>,
    adjacency: Vec<Vec<EdgeIdx>>,
    node_ids: HashMap<String, NodeIdx>,
    edge_ids: HashMap<String, EdgeIdx>,
    chunk_ids: HashMap<String, ChunkIdx>,
}

const UNIT_TOLERANCE: f64 = 1e-6;

/// Validates an embedding, renormalizing it when the norm is off but
/// within `[0.5, 2.0]`.
pub(crate) fn checked_unit(
    element: &str,
    mut v: Vec<f64>,
    dim: usize,
) -> Result<Vec<f64>, GraphError> {
    if v.len() != dim {
        return Err(GraphError::DimensionMismatch {
            what: element.to_string(),
            expected: dim,
            found: v.len(),
        });
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || !(0.5..=2.0).contains(&norm) {
        return Err(GraphError::BadEmbedding {
            element: element.to_string(),
            norm,
        });
    }
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, GraphError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| GraphError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| GraphError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            path: display.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), GraphError> {
    let io = |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads and validates a graph from its three JSON-lines files.
///
/// `dim` pins the embedding dimension; when absent it is taken from the first
/// embedding seen.
pub fn load_graph(
    nodes_path: &Path,
    edges_path: &Path,
    chunks_path: &Path,
    dim: Option<usize>,
) -> Result<KnowledgeGraph, GraphError> {
    let nodes = read_jsonl(nodes_path)?;
    let edges = read_jsonl(edges_path)?;
    let chunks = read_jsonl(chunks_path)?;
    KnowledgeGraph::from_lines(nodes, edges, chunks, dim)
}

impl KnowledgeGraph {
    pub fn from_lines(
        mut nodes: Vec<NodeLine>,
        mut edges: Vec<EdgeLine>,
        mut chunks: Vec<ChunkLine>,
        dim: Option<usize>,
    ) -> Result<Self, GraphError> {
        let dim = dim
            .or_else(|| nodes.first().map(|n| n.embedding.len()))
            .or_else(|| edges.first().map(|e| e.embedding.len()))
            .unwrap_or(0);

        chunks.sort_by(|a, b| a.id.cmp(&b.id));
        let mut chunk_ids = HashMap::with_capacity(chunks.len());
        let mut chunk_recs = Vec::with_capacity(chunks.len());
        for (i, c) in chunks.into_iter().enumerate() {
            if c.text.is_empty() {
                return Err(GraphError::EmptyChunk(c.id));
            }
            if chunk_ids.insert(c.id.clone(), ChunkIdx(i as u32)).is_some() {
                return Err(GraphError::DuplicateId {
                    kind: "chunk",
                    id: c.id,
                });
            }
            chunk_recs.push(ChunkRecord {
                id: c.id,
                doc_id: c.doc,
                text: c.text,
            });
        }
        let resolve_chunks = |element: &str, refs: Vec<String>| {
            let mut out = BTreeSet::new();
            for r in refs {
                match chunk_ids.get(&r) {
                    Some(&c) => {
                        out.insert(c);
                    }
                    None => {
                        return Err(GraphError::DanglingChunk {
                            element: element.to_string(),
                            chunk: r,
                        })
                    }
                }
            }
            Ok(out.into_iter().collect::<Vec<_>>())
        };

        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut node_ids = HashMap::with_capacity(nodes.len());
        let mut node_recs = Vec::with_capacity(nodes.len());
        for (i, n) in nodes.into_iter().enumerate() {
            if node_ids.insert(n.id.clone(), NodeIdx(i as u32)).is_some() {
                return Err(GraphError::DuplicateId {
                    kind: "node",
                    id: n.id,
                });
            }
            let embedding = checked_unit(&n.id, n.embedding, dim)?;
            let chunk_refs = resolve_chunks(&n.id, n.chunks)?;
            node_recs.push(NodeRecord {
                id: n.id,
                label: n.label,
                description: n.description,
                embedding,
                chunk_refs,
            });
        }

        edges.sort_by(|a, b| a.id.cmp(&b.id));
        let mut edge_ids = HashMap::with_capacity(edges.len());
        let mut edge_recs = Vec::with_capacity(edges.len());
        let mut adjacency = vec![Vec::new(); node_recs.len()];
        for (i, e) in edges.into_iter().enumerate() {
            let idx = EdgeIdx(i as u32);
            if edge_ids.insert(e.id.clone(), idx).is_some() {
                return Err(GraphError::DuplicateId {
                    kind: "edge",
                    id: e.id,
                });
            }
            let endpoint = |name: &String| {
                node_ids
                    .get(name)
                    .copied()
                    .ok_or_else(|| GraphError::DanglingEndpoint {
                        edge: e.id.clone(),
                        node: name.clone(),
                    })
            };
            let src = endpoint(&e.src)?;
            let dst = endpoint(&e.dst)?;
            let embedding = checked_unit(&e.id, e.embedding, dim)?;
            let chunk_refs = resolve_chunks(&e.id, e.chunks)?;
            let combined_text = if e.text.trim().is_empty() {
                format!(
                    "{} {} {}",
                    node_recs[src.index()].label,
                    e.relation,
                    node_recs[dst.index()].label
                )
            } else {
                e.text
            };
            adjacency[src.index()].push(idx);
            if dst != src {
                adjacency[dst.index()].push(idx);
            }
            edge_recs.push(EdgeRecord {
                id: e.id,
                src,
                dst,
                relation: e.relation,
                combined_text,
                embedding,
                chunk_refs,
            });
        }

        Ok(Self {
            dim,
            nodes: node_recs,
            edges: edge_recs,
            chunks: chunk_recs,
            adjacency,
            node_ids,
            edge_ids,
            chunk_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn node(&self, v: NodeIdx) -> &NodeRecord {
        &self.nodes[v.index()]
    }

    pub fn edge(&self, e: EdgeIdx) -> &EdgeRecord {
        &self.edges[e.index()]
    }

    pub fn chunk(&self, c: ChunkIdx) -> &ChunkRecord {
        &self.chunks[c.index()]
    }

    pub fn node_indices(&self) -> impl Iterator<Item = NodeIdx> + '_ {
        (0..self.nodes.len() as u32).map(NodeIdx)
    }

    pub fn edge_indices(&self) -> impl Iterator<Item = EdgeIdx> + '_ {
        (0..self.edges.len() as u32).map(EdgeIdx)
    }

    /// All nodes, then all edges.
    pub fn elements(&self) -> impl Iterator<Item = ElementRef> + '_ {
        self.node_indices()
            .map(ElementRef::Node)
            .chain(self.edge_indices().map(ElementRef::Edge))
    }

    pub fn chunk_indices(&self) -> impl Iterator<Item = ChunkIdx> + '_ {
        (0..self.chunks.len() as u32).map(ChunkIdx)
    }

    pub fn node_by_id(&self, id: &str) -> Option<NodeIdx> {
        self.node_ids.get(id).copied()
    }

    pub fn edge_by_id(&self, id: &str) -> Option<EdgeIdx> {
        self.edge_ids.get(id).copied()
    }

    pub fn chunk_by_id(&self, id: &str) -> Option<ChunkIdx> {
        self.chunk_ids.get(id).copied()
    }

    pub fn contains(&self, x: ElementRef) -> bool {
        match x {
            ElementRef::Node(v) => v.index() < self.nodes.len(),
            ElementRef::Edge(e) => e.index() < self.edges.len(),
        }
    }

    /// Bare identifier of a node or edge.
    pub fn element_id(&self, x: ElementRef) -> &str {
        match x {
            ElementRef::Node(v) => &self.node(v).id,
            ElementRef::Edge(e) => &self.edge(e).id,
        }
    }

    /// Kind-qualified key (`n:<id>` or `e:<id>`) used in exchange documents.
    pub fn element_key(&self, x: ElementRef) -> String {
        match x {
            ElementRef::Node(v) => format!("n:{}", self.node(v).id),
            ElementRef::Edge(e) => format!("e:{}", self.edge(e).id),
        }
    }

    /// Inverse of [`element_key`](Self::element_key).
    pub fn resolve_key(&self, key: &str) -> Result<ElementRef, GraphError> {
        let found = if let Some(id) = key.strip_prefix("n:") {
            self.node_by_id(id).map(ElementRef::Node)
        } else if let Some(id) = key.strip_prefix("e:") {
            self.edge_by_id(id).map(ElementRef::Edge)
        } else {
            None
        };
        found.ok_or_else(|| GraphError::UnknownElement(key.to_string()))
    }

    /// Human-readable text of an element: node label or edge triple text.
    pub fn element_text(&self, x: ElementRef) -> &str {
        match x {
            ElementRef::Node(v) => &self.node(v).label,
            ElementRef::Edge(e) => &self.edge(e).combined_text,
        }
    }

    pub fn embedding(&self, x: ElementRef) -> &[f64] {
        match x {
            ElementRef::Node(v) => &self.node(v).embedding,
            ElementRef::Edge(e) => &self.edge(e).embedding,
        }
    }

    fn chunk_refs(&self, x: ElementRef) -> &[ChunkIdx] {
        match x {
            ElementRef::Node(v) => &self.node(v).chunk_refs,
            ElementRef::Edge(e) => &self.edge(e).chunk_refs,
        }
    }

    /// Incident edges of `v` in ascending edge order. A self-loop is listed once.
    pub fn incident(&self, v: NodeIdx) -> &[EdgeIdx] {
        &self.adjacency[v.index()]
    }

    pub fn degree(&self, v: NodeIdx) -> usize {
        self.adjacency[v.index()].len()
    }

    /// `(edge, opposite node)` pairs for every incident edge of `v`.
    pub fn neighbors(&self, v: NodeIdx) -> Result<Vec<(EdgeIdx, NodeIdx)>, GraphError> {
        if v.index() >= self.nodes.len() {
            return Err(GraphError::UnknownNode(format!("#{}", v.0)));
        }
        Ok(self
            .incident(v)
            .iter()
            .map(|&e| (e, self.edge(e).opposite(v)))
            .collect())
    }

    /// Like [`neighbors`](Self::neighbors) but addressed by string id.
    pub fn neighbors_of(&self, id: &str) -> Result<Vec<(EdgeIdx, NodeIdx)>, GraphError> {
        let v = self
            .node_by_id(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
        self.neighbors(v)
    }

    /// Exhaustive cosine scan; descending similarity, ties by ascending id.
    pub fn top_k_similar(
        &self,
        query: &[f64],
        k: usize,
        scope: Scope,
    ) -> Result<Vec<(ElementRef, f64)>, GraphError> {
        if query.len() != self.dim {
            return Err(GraphError::DimensionMismatch {
                what: "query vector".into(),
                expected: self.dim,
                found: query.len(),
            });
        }
        let mut scored: Vec<(ElementRef, f64)> = Vec::new();
        if matches!(scope, Scope::Nodes | Scope::Both) {
            scored.extend(
                self.node_indices()
                    .map(|v| (ElementRef::Node(v), cosine(query, &self.node(v).embedding))),
            );
        }
        if matches!(scope, Scope::Edges | Scope::Both) {
            scored.extend(
                self.edge_indices()
                    .map(|e| (ElementRef::Edge(e), cosine(query, &self.edge(e).embedding))),
            );
        }
        let order = |a: &(ElementRef, f64), b: &(ElementRef, f64)| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.element_id(a.0).cmp(self.element_id(b.0)))
                .then_with(|| a.0.cmp(&b.0))
        };
        if k < scored.len() {
            if k == 0 {
                return Ok(Vec::new());
            }
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored)
    }

    /// Union of the chunk provenance of `elements`, deduplicated, in chunk-id order.
    pub fn chunks_for(&self, elements: &[ElementRef]) -> Result<Vec<ChunkIdx>, GraphError> {
        let mut out = BTreeSet::new();
        for &x in elements {
            if !self.contains(x) {
                return Err(GraphError::UnknownElement(format!("{x:?}")));
            }
            out.extend(self.chunk_refs(x).iter().copied());
        }
        Ok(out.into_iter().collect())
    }

    /// Canonical line records, sorted by id.
    pub fn to_lines(&self) -> (Vec<NodeLine>, Vec<EdgeLine>, Vec<ChunkLine>) {
        let chunk_names =
            |refs: &[ChunkIdx]| refs.iter().map(|&c| self.chunk(c).id.clone()).collect();
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeLine {
                id: n.id.clone(),
                label: n.label.clone(),
                description: n.description.clone(),
                embedding: n.embedding.clone(),
                chunks: chunk_names(&n.chunk_refs),
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| EdgeLine {
                id: e.id.clone(),
                src: self.node(e.src).id.clone(),
                dst: self.node(e.dst).id.clone(),
                relation: e.relation.clone(),
                text: e.combined_text.clone(),
                embedding: e.embedding.clone(),
                chunks: chunk_names(&e.chunk_refs),
            })
            .collect();
        let chunks = self
            .chunks
            .iter()
            .map(|c| ChunkLine {
                id: c.id.clone(),
                doc: c.doc_id.clone(),
                text: c.text.clone(),
            })
            .collect();
        (nodes, edges, chunks)
    }

    /// Writes `nodes.jsonl`, `edges.jsonl` and `chunks.jsonl` into `dir`.
    pub fn write_jsonl(&self, dir: &Path) -> Result<(), GraphError> {
        let (nodes, edges, chunks) = self.to_lines();
        write_jsonl(&dir.join("nodes.jsonl"), &nodes)?;
        write_jsonl(&dir.join("edges.jsonl"), &edges)?;
        write_jsonl(&dir.join("chunks.jsonl"), &chunks)
    }
}

impl fmt::Display for ElementRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementRef::Node(v) => write!(f, "node#{}", v.0),
            ElementRef::Edge(e) => write!(f, "edge#{}", e.0),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn node(id: &str, emb: &[f64]) -> NodeLine {
        NodeLine {
            id: id.into(),
            label: id.into(),
            description: String::new(),
            embedding: emb.to_vec(),
            chunks: vec![],
        }
    }

    pub(crate) fn edge(id: &str, src: &str, dst: &str, emb: &[f64]) -> EdgeLine {
        EdgeLine {
            id: id.into(),
            src: src.into(),
            dst: dst.into(),
            relation: "r".into(),
            text: String::new(),
            embedding: emb.to_vec(),
            chunks: vec![],
        }
    }

    fn chunk(id: &str) -> ChunkLine {
        ChunkLine {
            id: id.into(),
            doc: "d".into(),
            text: format!("text of {id}"),
        }
    }

    #[test]
    fn empty_graph() {
        let g = KnowledgeGraph::from_lines(vec![], vec![], vec![], None).unwrap();
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn smallest_graph_adjacency() {
        let g = KnowledgeGraph::from_lines(
            vec![node("A", &[1.0, 0.0]), node("B", &[0.0, 1.0])],
            vec![edge("e1", "A", "B", &[1.0, 0.0])],
            vec![],
            Some(2),
        )
        .unwrap();
        let a = g.node_by_id("A").unwrap();
        let b = g.node_by_id("B").unwrap();
        let e1 = g.edge_by_id("e1").unwrap();
        assert_eq!(g.incident(a), &[e1]);
        assert_eq!(g.incident(b), &[e1]);
        assert_eq!(g.edge(e1).combined_text, "A r B");
    }

    #[test]
    fn dangling_endpoint_names_missing_node() {
        let err = KnowledgeGraph::from_lines(
            vec![node("A", &[1.0]), node("B", &[1.0])],
            vec![edge("e1", "A", "C", &[1.0])],
            vec![],
            None,
        )
        .unwrap_err();
        match err {
            GraphError::DanglingEndpoint { node, .. } => assert_eq!(node, "C"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn embedding_renormalized_or_rejected() {
        let g =
            KnowledgeGraph::from_lines(vec![node("A", &[0.0, 1.5])], vec![], vec![], None).unwrap();
        assert_eq!(g.node(NodeIdx(0)).embedding, vec![0.0, 1.0]);
        let err = KnowledgeGraph::from_lines(vec![node("A", &[0.0, 3.0])], vec![], vec![], None)
            .unwrap_err();
        assert!(matches!(err, GraphError::BadEmbedding { .. }));
        let err = KnowledgeGraph::from_lines(vec![node("A", &[1.0])], vec![], vec![], Some(2))
            .unwrap_err();
        assert!(matches!(err, GraphError::DimensionMismatch { .. }));
    }

    #[test]
    fn neighbors_cases() {
        let g = KnowledgeGraph::from_lines(
            vec![
                node("A", &[1.0]),
                node("B", &[1.0]),
                node("C", &[1.0]),
                node("D", &[1.0]),
                node("Z", &[1.0]),
            ],
            vec![
                edge("e3", "A", "D", &[1.0]),
                edge("e1", "B", "A", &[1.0]),
                edge("e2", "A", "C", &[1.0]),
                edge("loop", "B", "B", &[1.0]),
            ],
            vec![],
            None,
        )
        .unwrap();
        assert!(g.neighbors_of("Z").unwrap().is_empty());
        let ids: Vec<_> = g
            .neighbors_of("A")
            .unwrap()
            .into_iter()
            .map(|(e, v)| (g.edge(e).id.as_str(), g.node(v).id.as_str()))
            .collect();
        assert_eq!(ids, vec![("e1", "B"), ("e2", "C"), ("e3", "D")]);
        let b = g.neighbors_of("B").unwrap();
        let loops: Vec<_> = b.iter().filter(|(e, _)| g.edge(*e).id == "loop").collect();
        assert_eq!(loops.len(), 1);
        assert_eq!(g.node(loops[0].1).id, "B");
        assert!(matches!(
            g.neighbors_of("nope"),
            Err(GraphError::UnknownNode(_))
        ));
    }

    #[test]
    fn top_k_analytic() {
        let g = KnowledgeGraph::from_lines(
            vec![
                node("x", &[1.0, 0.0]),
                node("y", &[0.0, 1.0]),
                node("z", &[0.6, 0.8]),
            ],
            vec![],
            vec![],
            None,
        )
        .unwrap();
        let top = g.top_k_similar(&[1.0, 0.0], 2, Scope::Nodes).unwrap();
        assert_eq!(g.element_id(top[0].0), "x");
        assert!((top[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(g.element_id(top[1].0), "z");
        assert!((top[1].1 - 0.6).abs() < 1e-12);
        assert_eq!(
            g.top_k_similar(&[1.0, 0.0], 10, Scope::Nodes)
                .unwrap()
                .len(),
            3
        );
        assert!(g.top_k_similar(&[1.0], 1, Scope::Nodes).is_err());
    }

    #[test]
    fn chunks_union_dedup() {
        let mut a = node("A", &[1.0]);
        a.chunks = vec!["c1".into(), "c2".into()];
        let mut b = node("B", &[1.0]);
        b.chunks = vec!["c1".into()];
        let mut e = edge("e", "A", "B", &[1.0]);
        e.chunks = vec!["c2".into(), "c3".into()];
        let g = KnowledgeGraph::from_lines(
            vec![a, b, node("C", &[1.0])],
            vec![e],
            vec![chunk("c3"), chunk("c1"), chunk("c2")],
            None,
        )
        .unwrap();
        let ids = |refs: Vec<ChunkIdx>| -> Vec<String> {
            refs.into_iter().map(|c| g.chunk(c).id.clone()).collect()
        };
        let av = ElementRef::Node(g.node_by_id("A").unwrap());
        let bv = ElementRef::Node(g.node_by_id("B").unwrap());
        let cv = ElementRef::Node(g.node_by_id("C").unwrap());
        let ev = ElementRef::Edge(g.edge_by_id("e").unwrap());
        assert!(g.chunks_for(&[cv]).unwrap().is_empty());
        assert_eq!(ids(g.chunks_for(&[av, bv]).unwrap()), vec!["c1", "c2"]);
        assert_eq!(
            ids(g.chunks_for(&[av, ev]).unwrap()),
            vec!["c1", "c2", "c3"]
        );
        let bv2 = ElementRef::Node(g.node_by_id("B").unwrap());
        assert_eq!(ids(g.chunks_for(&[bv, bv2]).unwrap()), vec!["c1"]);
    }

    #[test]
    fn dangling_chunk_rejected() {
        let mut a = node("A", &[1.0]);
        a.chunks = vec!["missing".into()];
        let err = KnowledgeGraph::from_lines(vec![a], vec![], vec![], None).unwrap_err();
        assert!(matches!(err, GraphError::DanglingChunk { .. }));
    }
}
