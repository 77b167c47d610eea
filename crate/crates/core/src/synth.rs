//! Synthetic graphs with a planted low-cost evidence path.
//!
//! The query vector is the first basis vector `e0`. An element meant to have
//! cost `c` gets the embedding `(1 - c) e0 + sqrt(1 - (1 - c)^2) u` with `u` a
//! random unit vector orthogonal to `e0`, so its cosine to the query is
//! exactly `1 - c`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::anchor::AnchorGroupSet;
use crate::bundle::{write_bundle, BundleError, Manifest};
use crate::embedding::PrecomputedEmbeddings;
use crate::graph::{ChunkLine, EdgeLine, ElementRef, GraphError, KnowledgeGraph, NodeLine};
use crate::value::{normalize, QueryEmbedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Edges on the planted path.
    pub path_length: usize,
    pub groups: usize,
    pub noise_nodes: usize,
    pub noise_cost: [f64; 2],
    pub planted_cost: [f64; 2],
    /// Length of a medium-cost chain hanging off the middle of the planted
    /// path; its far end is the answer node. Zero disables it.
    pub answer_hops: usize,
    pub answer_cost: [f64; 2],
    /// Require every planted cost to be strictly below every noise cost.
    pub separation: bool,
    /// Cut the planted path between the first two anchors.
    pub split: bool,
    pub dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            path_length: 4,
            groups: 2,
            noise_nodes: 4,
            noise_cost: [0.9, 1.0],
            planted_cost: [0.08, 0.1],
            answer_hops: 0,
            answer_cost: [0.45, 0.55],
            separation: true,
            split: false,
            dim: 16,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub query: String,
    pub query_vector: Vec<f64>,
    /// Node ids of each anchor group (one planted node per group).
    pub anchors: Vec<Vec<String>>,
    pub anchor_labels: Vec<String>,
    pub planted_nodes: Vec<String>,
    pub planted_edges: Vec<String>,
    pub answer_node: Option<String>,
    pub split: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub spec: SyntheticSpec,
    pub graph: KnowledgeGraph,
    pub truth: GroundTruth,
}

fn check_range(name: &str, r: [f64; 2]) -> Result<(), SynthError> {
    if !(0.0..=1.0).contains(&r[0]) || !(0.0..=1.0).contains(&r[1]) || r[0] > r[1] {
        return Err(SynthError::Infeasible(format!(
            "{name} must satisfy 0 <= lo <= hi <= 1, got {r:?}"
        )));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.groups == 0 || self.groups > 64 {
            return Err(SynthError::Infeasible("groups must be in 1..=64".into()));
        }
        if self.path_length + 1 < self.groups {
            return Err(SynthError::Infeasible(format!(
                "path length {} cannot host {} anchors",
                self.path_length, self.groups
            )));
        }
        if self.split && self.groups < 2 {
            return Err(SynthError::Infeasible(
                "split needs at least two groups".into(),
            ));
        }
        if self.dim < 2 {
            return Err(SynthError::Infeasible(
                "dimension must be at least 2".into(),
            ));
        }
        check_range("planted_cost", self.planted_cost)?;
        check_range("noise_cost", self.noise_cost)?;
        check_range("answer_cost", self.answer_cost)?;
        if self.separation && self.planted_cost[1] >= self.noise_cost[0] {
            return Err(SynthError::Infeasible(
                "planted costs must lie strictly below noise costs".into(),
            ));
        }
        Ok(())
    }

    /// Path positions of the anchors, spread evenly with both ends included.
    pub fn anchor_positions(&self) -> Vec<usize> {
        if self.groups == 1 {
            return vec![0];
        }
        (0..self.groups)
            .map(|i| (i * self.path_length + (self.groups - 1) / 2) / (self.groups - 1))
            .collect()
    }
}

struct Embedder {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Embedder {
    fn with_cost(&mut self, cost: f64) -> Vec<f64> {
        let c = 1.0 - cost;
        let u = loop {
            let mut v: Vec<f64> = (0..self.dim)
                .map(|_| StandardNormal.sample(&mut self.rng))
                .collect();
            v[0] = 0.0;
            if let Some(u) = normalize(v) {
                break u;
            }
        };
        let s = (1.0 - c * c).max(0.0).sqrt();
        let mut out: Vec<f64> = u.iter().map(|x| s * x).collect();
        out[0] = c;
        out
    }

    fn cost_in(&mut self, r: [f64; 2]) -> f64 {
        if r[0] == r[1] {
            r[0]
        } else {
            self.rng.random_range(r[0]..=r[1])
        }
    }
}

fn node_line(id: &str, embedding: Vec<f64>) -> NodeLine {
    NodeLine {
        id: id.into(),
        label: format!("Entity {id}"),
        description: String::new(),
        embedding,
        chunks: vec![format!("c-{id}")],
    }
}

fn edge_line(id: &str, src: &str, dst: &str, relation: &str, embedding: Vec<f64>) -> EdgeLine {
    EdgeLine {
        id: id.into(),
        src: src.into(),
        dst: dst.into(),
        relation: relation.into(),
        text: format!("Entity {src} {relation} Entity {dst}"),
        embedding,
        chunks: vec![],
    }
}

pub fn synth_kg(spec: &SyntheticSpec) -> Result<SyntheticInstance, SynthError> {
    spec.validate()?;
    let mut emb = Embedder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        dim: spec.dim,
    };
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut attachable: Vec<String> = Vec::new();

    let planted: Vec<String> = (0..=spec.path_length).map(|i| format!("p{i:03}")).collect();
    for id in &planted {
        let c = emb.cost_in(spec.planted_cost);
        nodes.push(node_line(id, emb.with_cost(c)));
        attachable.push(id.clone());
    }
    let positions = spec.anchor_positions();
    let cut = spec.split.then(|| positions[1] - 1);
    let mut planted_edges = Vec::new();
    for i in 0..spec.path_length {
        if Some(i) == cut {
            continue;
        }
        let id = format!("pe{i:03}");
        let c = emb.cost_in(spec.planted_cost);
        edges.push(edge_line(
            &id,
            &planted[i],
            &planted[i + 1],
            "linked_to",
            emb.with_cost(c),
        ));
        planted_edges.push(id);
    }

    let mut answer_node = None;
    if spec.answer_hops > 0 {
        let mut prev = planted[spec.path_length / 2].clone();
        for i in 0..spec.answer_hops {
            let id = format!("a{i:03}");
            let c = emb.cost_in(spec.answer_cost);
            nodes.push(node_line(&id, emb.with_cost(c)));
            let c = emb.cost_in(spec.answer_cost);
            edges.push(edge_line(
                &format!("ae{i:03}"),
                &prev,
                &id,
                "leads_to",
                emb.with_cost(c),
            ));
            prev = id;
        }
        answer_node = Some(prev);
    }

    for i in 0..spec.noise_nodes {
        let id = format!("x{i:04}");
        let host = attachable[emb.rng.random_range(0..attachable.len())].clone();
        let c = emb.cost_in(spec.noise_cost);
        nodes.push(node_line(&id, emb.with_cost(c)));
        let c = emb.cost_in(spec.noise_cost);
        edges.push(edge_line(
            &format!("xe{i:04}"),
            &host,
            &id,
            "mentions",
            emb.with_cost(c),
        ));
        attachable.push(id);
    }

    let chunks: Vec<ChunkLine> = nodes
        .iter()
        .map(|n| ChunkLine {
            id: format!("c-{}", n.id),
            doc: "synthetic".into(),
            text: format!("Passage about {}.", n.label),
        })
        .collect();
    let graph = KnowledgeGraph::from_lines(nodes, edges, chunks, Some(spec.dim))?;

    let anchor_ids: Vec<String> = positions.iter().map(|&p| planted[p].clone()).collect();
    let anchor_labels: Vec<String> = anchor_ids.iter().map(|id| format!("Entity {id}")).collect();
    let quoted: Vec<String> = anchor_labels.iter().map(|l| format!("\"{l}\"")).collect();
    let query = format!("How are {} connected?", quoted.join(" and "));
    let mut query_vector = vec![0.0; spec.dim];
    query_vector[0] = 1.0;

    let truth = GroundTruth {
        seed: spec.seed,
        query,
        query_vector,
        anchors: anchor_ids.into_iter().map(|id| vec![id]).collect(),
        anchor_labels,
        planted_nodes: planted,
        planted_edges,
        answer_node,
        split: spec.split,
    };
    Ok(SyntheticInstance {
        spec: spec.clone(),
        graph,
        truth,
    })
}

impl SyntheticInstance {
    pub fn query_embedding(&self) -> QueryEmbedding {
        QueryEmbedding::new(self.truth.query.clone(), self.truth.query_vector.clone())
            .expect("basis vector")
    }

    /// One uniformly weighted group per planted anchor.
    pub fn anchor_groups(&self) -> AnchorGroupSet {
        let drafts = self
            .truth
            .anchors
            .iter()
            .zip(&self.truth.anchor_labels)
            .map(|(ids, label)| {
                let members = ids
                    .iter()
                    .map(|id| ElementRef::Node(self.graph.node_by_id(id).expect("planted node")))
                    .collect::<BTreeSet<_>>();
                (label.clone(), members, 1.0)
            })
            .collect();
        AnchorGroupSet::from_weighted(self.query_embedding(), drafts).expect("planted anchors")
    }

    pub fn planted_elements(&self) -> (BTreeSet<String>, BTreeSet<String>) {
        (
            self.truth.planted_nodes.iter().cloned().collect(),
            self.truth.planted_edges.iter().cloned().collect(),
        )
    }

    /// Text embeddings for the query, each anchor label and every chunk. A
    /// chunk shares its owning node's vector.
    pub fn embedding_pairs(&self) -> Vec<(String, Vec<f64>)> {
        let mut pairs = vec![(self.truth.query.clone(), self.truth.query_vector.clone())];
        for (ids, label) in self.truth.anchors.iter().zip(&self.truth.anchor_labels) {
            let v = self.graph.node_by_id(&ids[0]).expect("planted node");
            pairs.push((label.clone(), self.graph.node(v).embedding.clone()));
        }
        for c in self.graph.chunk_indices() {
            let chunk = self.graph.chunk(c);
            let owner = chunk.id.trim_start_matches("c-");
            if let Some(v) = self.graph.node_by_id(owner) {
                pairs.push((chunk.text.clone(), self.graph.node(v).embedding.clone()));
            }
        }
        pairs
    }

    pub fn provider(&self) -> PrecomputedEmbeddings {
        PrecomputedEmbeddings::from_pairs(self.spec.dim, self.embedding_pairs())
    }

    /// Writes a queryable bundle: graph files and manifest, ground truth,
    /// precomputed embeddings for the query, anchor labels and chunks,
    /// reasoner fixtures that name the anchors, and a run config.
    pub fn write(&self, out: &Path) -> Result<Manifest, SynthError> {
        let manifest = write_bundle(&self.graph, out)?;
        let truth = serde_json::to_string_pretty(&self.truth).expect("serializes");
        std::fs::write(out.join("ground_truth.json"), truth + "\n")?;

        let emb_lines: Vec<_> = self
            .embedding_pairs()
            .into_iter()
            .map(|(text, v)| json!({"text": text, "embedding": v}))
            .collect();
        write_lines(&out.join("embeddings.jsonl"), &emb_lines)?;

        let keywords: Vec<_> = self
            .truth
            .anchor_labels
            .iter()
            .map(|l| json!({"text": l}))
            .collect();
        let groups: Vec<_> = self
            .truth
            .anchors
            .iter()
            .zip(&self.truth.anchor_labels)
            .map(|(ids, label)| {
                json!({
                    "concept": label,
                    "members": ids.iter().map(|id| format!("n:{id}")).collect::<Vec<_>>(),
                    "weight": 1.0,
                })
            })
            .collect();
        let fixtures = vec![
            json!({"kind": "KeywordExtract", "query": self.truth.query, "response": {"keywords": keywords}}),
            json!({"kind": "Group", "query": self.truth.query, "response": {"groups": groups}}),
        ];
        write_lines(&out.join("fixtures.jsonl"), &fixtures)?;

        let config = json!({
            "D": self.spec.dim,
            "provider": {"kind": "precomputed_file", "path": "embeddings.jsonl"},
            "reasoner": {"kind": "mock", "fixtures": "fixtures.jsonl"},
        });
        let text = serde_json::to_string_pretty(&config).expect("serializes");
        std::fs::write(out.join("config.json"), text + "\n")?;
        Ok(manifest)
    }
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) -> std::io::Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{cosine, ValueFn, ValueModel};

    #[test]
    fn bare_path() {
        let spec = SyntheticSpec {
            path_length: 3,
            noise_nodes: 0,
            ..Default::default()
        };
        let inst = synth_kg(&spec).unwrap();
        assert_eq!(inst.graph.node_count(), 4);
        assert_eq!(inst.graph.edge_count(), 3);
        assert_eq!(inst.truth.anchors, vec![vec!["p000"], vec!["p003"]]);
    }

    #[test]
    fn same_seed_same_graph() {
        let spec = SyntheticSpec {
            seed: 9,
            noise_nodes: 12,
            answer_hops: 2,
            ..Default::default()
        };
        let a = synth_kg(&spec).unwrap();
        let b = synth_kg(&spec).unwrap();
        assert_eq!(a.graph.to_lines(), b.graph.to_lines());
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn costs_hit_their_ranges() {
        let spec = SyntheticSpec {
            seed: 3,
            noise_nodes: 20,
            answer_hops: 3,
            ..Default::default()
        };
        let inst = synth_kg(&spec).unwrap();
        let model = ValueModel::new(&inst.graph, inst.query_embedding()).unwrap();
        for v in inst.graph.node_indices() {
            let id = &inst.graph.node(v).id;
            let cost = model.cost(ElementRef::Node(v));
            let range = match id.chars().next() {
                Some('p') => spec.planted_cost,
                Some('x') => spec.noise_cost,
                _ => spec.answer_cost,
            };
            assert!(
                cost >= range[0] - 1e-9 && cost <= range[1] + 1e-9,
                "{id}: {cost}"
            );
            let e = &inst.graph.node(v).embedding;
            assert!((cosine(e, e) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn anchors_spread_along_path() {
        let spec = SyntheticSpec {
            path_length: 6,
            groups: 3,
            ..Default::default()
        };
        assert_eq!(spec.anchor_positions(), vec![0, 3, 6]);
        let spec = SyntheticSpec {
            path_length: 1,
            groups: 3,
            ..Default::default()
        };
        assert!(matches!(synth_kg(&spec), Err(SynthError::Infeasible(_))));
    }

    #[test]
    fn split_disconnects_first_anchors() {
        let spec = SyntheticSpec {
            split: true,
            noise_nodes: 0,
            ..Default::default()
        };
        let inst = synth_kg(&spec).unwrap();
        assert_eq!(inst.graph.edge_count(), spec.path_length - 1);
    }
}
