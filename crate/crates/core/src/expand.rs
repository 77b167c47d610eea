//! Reasoner-guided multi-hop growth of ranked candidates, their merge into
//! one evidence graph, and the triples-plus-chunks context handed to answer
//! generation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::anchor::ChunkVectors;
use crate::embedding::EmbeddingProvider;
use crate::graph::{ChunkIdx, ChunkRecord, EdgeIdx, ElementRef, KnowledgeGraph, NodeIdx};
use crate::rank::ScoredCeg;
use crate::reasoner::{
    decide, NeighborOffer, Payload, Reasoner, ReasonerRequest, ResponseBody, Triple,
    INSUFFICIENT_EVIDENCE,
};
use crate::value::{QueryEmbedding, ValueFn};

pub const DEFAULT_OFFER_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    DepthLimit,
    NoSelection,
    Sufficient,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandParams {
    pub depth: usize,
    pub offer_cap: usize,
    /// Upper bound on nodes plus edges of an expanded candidate.
    pub max_elements: Option<usize>,
}

impl Default for ExpandParams {
    fn default() -> Self {
        Self {
            depth: 6,
            offer_cap: DEFAULT_OFFER_CAP,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HopAdditions {
    pub nodes: Vec<NodeIdx>,
    pub edges: Vec<EdgeIdx>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedCeg {
    pub base: ScoredCeg,
    /// `hops[l]` holds what hop `l + 1` added.
    pub hops: Vec<HopAdditions>,
    pub terminated: Termination,
    pub nodes: BTreeSet<NodeIdx>,
    pub edges: BTreeSet<EdgeIdx>,
}

#[derive(Debug, Clone)]
struct Offer {
    edge: EdgeIdx,
    node: Option<NodeIdx>,
    similarity: f64,
}

fn triple(graph: &KnowledgeGraph, e: EdgeIdx) -> Triple {
    let rec = graph.edge(e);
    [
        graph.node(rec.src).label.clone(),
        rec.relation.clone(),
        graph.node(rec.dst).label.clone(),
    ]
}

fn frontier<V: ValueFn + ?Sized>(
    graph: &KnowledgeGraph,
    nodes: &BTreeSet<NodeIdx>,
    edges: &BTreeSet<EdgeIdx>,
    value: &V,
) -> Vec<Offer> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &v in nodes {
        for &e in graph.incident(v) {
            if edges.contains(&e) || !seen.insert(e) {
                continue;
            }
            let u = graph.edge(e).opposite(v);
            let node = (!nodes.contains(&u)).then_some(u);
            let mut total = value.value(ElementRef::Edge(e));
            if let Some(u) = node {
                total = (total + value.value(ElementRef::Node(u))) / 2.0;
            }
            out.push(Offer {
                edge: e,
                node,
                similarity: total,
            });
        }
    }
    out.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.edge.cmp(&b.edge))
    });
    out
}

/// Grows `ceg` hop by hop with the `(edge, opposite node)` units the reasoner
/// selects. Reasoner failure ends the expansion as an empty selection would.
pub fn reasoning_expand<R: Reasoner + ?Sized, V: ValueFn + ?Sized>(
    graph: &KnowledgeGraph,
    ceg: &ScoredCeg,
    reasoner: &R,
    value: &V,
    params: &ExpandParams,
    query: &str,
) -> ExpandedCeg {
    let mut nodes = ceg.ceg.nodes.clone();
    let mut edges = ceg.ceg.edges.clone();
    let mut hops = Vec::new();
    let mut terminated = Termination::DepthLimit;

    for hop in 1..=params.depth {
        let mut offers = frontier(graph, &nodes, &edges, value);
        offers.truncate(params.offer_cap);
        if offers.is_empty() {
            terminated = Termination::NoSelection;
            break;
        }
        let wire_offers = offers
            .iter()
            .map(|o| {
                let rec = graph.edge(o.edge);
                NeighborOffer {
                    id: graph.element_key(ElementRef::Edge(o.edge)),
                    relation: rec.relation.clone(),
                    edge_text: rec.combined_text.clone(),
                    node: o.node.map(|u| graph.node(u).id.clone()),
                    node_label: o.node.map(|u| graph.node(u).label.clone()),
                    similarity: o.similarity,
                }
            })
            .collect();
        let req = ReasonerRequest::new(
            query,
            Payload::SelectNeighbors {
                hop,
                evidence: edges.iter().map(|&e| triple(graph, e)).collect(),
                offers: wire_offers,
            },
        );
        let (selected, sufficient) = match decide(reasoner, &req) {
            Ok(resp) => match resp.body {
                ResponseBody::Selection {
                    selected,
                    sufficient,
                } => (selected, sufficient),
                _ => (Vec::new(), false),
            },
            Err(e) => {
                tracing::warn!(hop, error = %e, "neighbor selection failed, stopping expansion");
                (Vec::new(), false)
            }
        };

        let mut added = HopAdditions::default();
        let mut out_of_budget = false;
        for key in &selected {
            let Ok(ElementRef::Edge(e)) = graph.resolve_key(key) else {
                continue;
            };
            let Some(offer) = offers.iter().find(|o| o.edge == e) else {
                continue;
            };
            if edges.contains(&e) {
                continue;
            }
            let new_node = offer.node.filter(|u| !nodes.contains(u));
            let grow = 1 + usize::from(new_node.is_some());
            if params
                .max_elements
                .is_some_and(|cap| nodes.len() + edges.len() + grow > cap)
            {
                out_of_budget = true;
                break;
            }
            edges.insert(e);
            added.edges.push(e);
            if let Some(u) = new_node {
                nodes.insert(u);
                added.nodes.push(u);
            }
        }

        let empty = added.nodes.is_empty() && added.edges.is_empty();
        if !empty {
            hops.push(added);
        }
        if out_of_budget {
            terminated = Termination::BudgetExhausted;
            break;
        }
        if sufficient {
            terminated = Termination::Sufficient;
            break;
        }
        if empty {
            terminated = Termination::NoSelection;
            break;
        }
    }

    ExpandedCeg {
        base: ceg.clone(),
        hops,
        terminated,
        nodes,
        edges,
    }
}

/// Union of expanded candidates with per-element provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnifiedEvidenceGraph {
    pub nodes: BTreeMap<NodeIdx, BTreeSet<usize>>,
    pub edges: BTreeMap<EdgeIdx, BTreeSet<usize>>,
}

impl UnifiedEvidenceGraph {
    pub fn elements(&self) -> Vec<ElementRef> {
        self.nodes
            .keys()
            .map(|&v| ElementRef::Node(v))
            .chain(self.edges.keys().map(|&e| ElementRef::Edge(e)))
            .collect()
    }

    pub fn contains(&self, x: ElementRef) -> bool {
        match x {
            ElementRef::Node(v) => self.nodes.contains_key(&v),
            ElementRef::Edge(e) => self.edges.contains_key(&e),
        }
    }

    pub fn is_subset_of(&self, other: &UnifiedEvidenceGraph) -> bool {
        self.nodes.keys().all(|v| other.nodes.contains_key(v))
            && self.edges.keys().all(|e| other.edges.contains_key(e))
    }
}

pub fn merge(expanded: &[ExpandedCeg]) -> UnifiedEvidenceGraph {
    let mut out = UnifiedEvidenceGraph::default();
    for (i, x) in expanded.iter().enumerate() {
        for &v in &x.nodes {
            out.nodes.entry(v).or_default().insert(i);
        }
        for &e in &x.edges {
            out.edges.entry(e).or_default().insert(i);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridContext {
    pub triples: Vec<Triple>,
    pub chunks: Vec<ChunkRecord>,
}

/// Triples of every merged edge in edge-id order, plus the provenance chunks
/// of all merged elements ranked by query cosine and cut to `chunk_budget`.
pub fn assemble_context(
    graph: &KnowledgeGraph,
    merged: &UnifiedEvidenceGraph,
    chunk_budget: usize,
    query: &QueryEmbedding,
    vectors: &ChunkVectors,
    provider: &dyn EmbeddingProvider,
) -> HybridContext {
    let triples = merged.edges.keys().map(|&e| triple(graph, e)).collect();
    let mut chunks: Vec<(ChunkIdx, Option<f64>)> = graph
        .chunks_for(&merged.elements())
        .expect("merged elements come from the graph")
        .into_iter()
        .map(|c| (c, vectors.similarity(graph, provider, c, query)))
        .collect();
    // chunks that could not be embedded go last
    chunks.sort_by(|a, b| {
        let key = |s: Option<f64>| s.unwrap_or(f64::NEG_INFINITY);
        key(b.1).total_cmp(&key(a.1)).then_with(|| a.0.cmp(&b.0))
    });
    chunks.truncate(chunk_budget);
    HybridContext {
        triples,
        chunks: chunks
            .into_iter()
            .map(|(c, _)| graph.chunk(c).clone())
            .collect(),
    }
}

/// Entity labels of the merged nodes, in id order.
pub fn entity_labels(graph: &KnowledgeGraph, merged: &UnifiedEvidenceGraph) -> Vec<String> {
    merged
        .nodes
        .keys()
        .map(|&v| graph.node(v).label.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedAnswer {
    pub answer: String,
    /// Set when the reasoner failed and the sentinel was substituted.
    pub degraded: bool,
}

pub fn generate_answer<R: Reasoner + ?Sized>(
    reasoner: &R,
    query: &str,
    ctx: &HybridContext,
    entities: &[String],
) -> GeneratedAnswer {
    let req = ReasonerRequest::new(
        query,
        Payload::GenerateAnswer {
            triples: ctx.triples.clone(),
            entities: entities.to_vec(),
            chunks: ctx.chunks.iter().map(|c| c.text.clone()).collect(),
        },
    );
    match decide(reasoner, &req) {
        Ok(resp) => match resp.body {
            ResponseBody::Answer(answer) => GeneratedAnswer {
                answer,
                degraded: false,
            },
            _ => GeneratedAnswer {
                answer: INSUFFICIENT_EVIDENCE.into(),
                degraded: true,
            },
        },
        Err(e) => {
            tracing::warn!(error = %e, "answer generation failed");
            GeneratedAnswer {
                answer: INSUFFICIENT_EVIDENCE.into(),
                degraded: true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bubble::CandidateEvidenceGraph;
    use crate::embedding::PrecomputedEmbeddings;
    use crate::graph::{ChunkLine, EdgeLine, NodeLine};
    use crate::reasoner::{MockReasoner, RawReply, ReasonerError, RequestKind};
    use crate::value::ValueModel;
    use serde_json::json;

    struct Failing;

    impl Reasoner for Failing {
        fn respond(&self, _: &ReasonerRequest) -> Result<RawReply, ReasonerError> {
            Err(ReasonerError::Timeout(5))
        }
    }

    fn n(id: &str, emb: [f64; 2], chunks: &[&str]) -> NodeLine {
        NodeLine {
            id: id.into(),
            label: id.into(),
            description: String::new(),
            embedding: emb.to_vec(),
            chunks: chunks.iter().map(|c| c.to_string()).collect(),
        }
    }

    fn e(id: &str, src: &str, rel: &str, dst: &str, emb: [f64; 2]) -> EdgeLine {
        EdgeLine {
            id: id.into(),
            src: src.into(),
            dst: dst.into(),
            relation: rel.into(),
            text: String::new(),
            embedding: emb.to_vec(),
            chunks: vec![],
        }
    }

    fn c(id: &str) -> ChunkLine {
        ChunkLine {
            id: id.into(),
            doc: "d".into(),
            text: format!("chunk {id}"),
        }
    }

    const QUERY: &str = "Which actors appear in the movie directed by Director Z?";

    fn movie_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_lines(
            vec![
                n("Director Z", [1.0, 0.0], &["c1"]),
                n("Movie X", [1.0, 0.0], &["c2"]),
                n("Actor Y", [0.8, 0.6], &["c3"]),
                n("2019", [0.0, 1.0], &["c4"]),
            ],
            vec![
                e("d1", "Director Z", "directed", "Movie X", [1.0, 0.0]),
                e("m1", "Movie X", "cast_member", "Actor Y", [0.8, 0.6]),
                e("m2", "Movie X", "release_date", "2019", [0.6, 0.8]),
            ],
            vec![c("c1"), c("c2"), c("c3"), c("c4")],
            Some(2),
        )
        .unwrap()
    }

    fn scored(graph: &KnowledgeGraph, nodes: &[&str], edges: &[&str]) -> ScoredCeg {
        ScoredCeg {
            ceg: CandidateEvidenceGraph {
                nodes: nodes
                    .iter()
                    .map(|id| graph.node_by_id(id).unwrap())
                    .collect(),
                edges: edges
                    .iter()
                    .map(|id| graph.edge_by_id(id).unwrap())
                    .collect(),
                steiner_node: None,
                covered_groups: [0].into(),
                intra_group_only: true,
                is_fallback: false,
                discovery_cost: 0.0,
            },
            cost_sem: 0.0,
            r_miss: 0.0,
            penalty: 1.0,
            score: 1.0,
        }
    }

    fn model(graph: &KnowledgeGraph) -> ValueModel<'_> {
        ValueModel::new(graph, QueryEmbedding::new(QUERY, vec![1.0, 0.0]).unwrap()).unwrap()
    }

    #[test]
    fn depth_zero_is_identity() {
        let g = movie_graph();
        let base = scored(&g, &["Director Z", "Movie X"], &["d1"]);
        let x = reasoning_expand(
            &g,
            &base,
            &MockReasoner::new(),
            &model(&g),
            &ExpandParams {
                depth: 0,
                ..Default::default()
            },
            QUERY,
        );
        assert_eq!(x.terminated, Termination::DepthLimit);
        assert_eq!(x.nodes, base.ceg.nodes);
        assert!(x.hops.is_empty());
    }

    #[test]
    fn fixture_selects_cast_edge() {
        let g = movie_graph();
        let mock = MockReasoner::new().with_fixture(
            RequestKind::SelectNeighbors,
            QUERY,
            json!({"selected": ["e:m1"]}),
        );
        let base = scored(&g, &["Director Z", "Movie X"], &["d1"]);
        let x = reasoning_expand(
            &g,
            &base,
            &mock,
            &model(&g),
            &ExpandParams::default(),
            QUERY,
        );
        let actor = g.node_by_id("Actor Y").unwrap();
        assert_eq!(x.hops[0].nodes, vec![actor]);
        assert!(!x.nodes.contains(&g.node_by_id("2019").unwrap()));
        // hop 2 offers only the release edge, which the fixture does not name
        assert_eq!(x.terminated, Termination::NoSelection);
    }

    #[test]
    fn closed_frontier_and_failure() {
        let g = movie_graph();
        let all = scored(
            &g,
            &["Director Z", "Movie X", "Actor Y", "2019"],
            &["d1", "m1", "m2"],
        );
        let x = reasoning_expand(
            &g,
            &all,
            &MockReasoner::new(),
            &model(&g),
            &ExpandParams::default(),
            QUERY,
        );
        assert_eq!(x.terminated, Termination::NoSelection);
        let base = scored(&g, &["Movie X"], &[]);
        let x = reasoning_expand(
            &g,
            &base,
            &Failing,
            &model(&g),
            &ExpandParams::default(),
            QUERY,
        );
        assert_eq!(x.terminated, Termination::NoSelection);
        assert_eq!(x.nodes, base.ceg.nodes);
    }

    #[test]
    fn sufficiency_and_budget() {
        let g = movie_graph();
        let mock = MockReasoner::new().with_fixture(
            RequestKind::SelectNeighbors,
            QUERY,
            json!({"selected": ["e:m1", "e:m2"], "sufficient": true}),
        );
        let base = scored(&g, &["Movie X"], &[]);
        let x = reasoning_expand(
            &g,
            &base,
            &mock,
            &model(&g),
            &ExpandParams::default(),
            QUERY,
        );
        assert_eq!(x.terminated, Termination::Sufficient);
        assert_eq!(x.edges.len(), 2);
        let capped = ExpandParams {
            max_elements: Some(3),
            ..Default::default()
        };
        let x = reasoning_expand(&g, &base, &mock, &model(&g), &capped, QUERY);
        assert_eq!(x.terminated, Termination::BudgetExhausted);
        assert_eq!(x.nodes.len() + x.edges.len(), 3);
    }

    #[test]
    fn merge_provenance() {
        let g = movie_graph();
        let mk = |nodes: &[&str]| ExpandedCeg {
            base: scored(&g, nodes, &[]),
            hops: vec![],
            terminated: Termination::DepthLimit,
            nodes: nodes.iter().map(|id| g.node_by_id(id).unwrap()).collect(),
            edges: BTreeSet::new(),
        };
        let u = merge(&[mk(&["Movie X", "Actor Y"]), mk(&["Movie X"]), mk(&["2019"])]);
        let movie = g.node_by_id("Movie X").unwrap();
        assert_eq!(u.nodes[&movie], BTreeSet::from([0, 1]));
        assert_eq!(u.nodes.len(), 3);
    }

    #[test]
    fn context_triples_and_chunk_budget() {
        let g = movie_graph();
        let provider = PrecomputedEmbeddings::from_pairs(
            2,
            [
                ("chunk c1".to_string(), vec![0.0, 1.0]),
                ("chunk c2".to_string(), vec![1.0, 0.0]),
                ("chunk c3".to_string(), vec![0.6, 0.8]),
            ],
        );
        let vectors = ChunkVectors::new(&g);
        let mut u = UnifiedEvidenceGraph::default();
        for id in ["Director Z", "Movie X", "Actor Y", "2019"] {
            u.nodes.insert(g.node_by_id(id).unwrap(), [0].into());
        }
        u.edges.insert(g.edge_by_id("d1").unwrap(), [0].into());
        let q = QueryEmbedding::new(QUERY, vec![1.0, 0.0]).unwrap();
        let ctx = assemble_context(&g, &u, 2, &q, &vectors, &provider);
        assert_eq!(
            ctx.triples,
            vec![[
                "Director Z".to_string(),
                "directed".into(),
                "Movie X".into()
            ]]
        );
        let ids: Vec<&str> = ctx.chunks.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["c2", "c3"]);
        assert!(assemble_context(&g, &u, 0, &q, &vectors, &provider)
            .chunks
            .is_empty());
    }

    #[test]
    fn answer_paths() {
        let ctx = HybridContext::default();
        let ents = vec!["Actor Y".to_string()];
        let a = generate_answer(&MockReasoner::new(), QUERY, &ctx, &ents);
        assert_eq!(a.answer, "Actor Y");
        let a = generate_answer(&Failing, QUERY, &ctx, &ents);
        assert_eq!(a.answer, INSUFFICIENT_EVIDENCE);
        assert!(a.degraded);
    }
}
