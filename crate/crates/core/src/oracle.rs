//! Exact brute-force OISR solver for small graphs.
//!
//! Maximizes the mean element value over connected subgraphs that intersect
//! every anchor group. Exponential by design; used as the reference answer
//! in tests and evaluation.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorError, AnchorGroupSet};
use crate::bubble::CandidateEvidenceGraph;
use crate::graph::{EdgeIdx, EdgeLine, ElementRef, GraphError, KnowledgeGraph, NodeIdx, NodeLine};
use crate::value::{QueryEmbedding, ValueFn, ValueTable};

pub const DEFAULT_N_MAX: usize = 16;

const PHI_TIE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("empty subgraph has no objective value")]
    EmptySubgraph,
    #[error("edge {0} has an endpoint outside the subgraph")]
    LooseEdge(String),
    #[error("instance has {found} elements, limit is {limit}")]
    TooLarge { found: usize, limit: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("instance: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub nodes: BTreeSet<NodeIdx>,
    pub edges: BTreeSet<EdgeIdx>,
}

impl Subgraph {
    pub fn new(
        nodes: impl IntoIterator<Item = NodeIdx>,
        edges: impl IntoIterator<Item = EdgeIdx>,
    ) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            edges: edges.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elements(&self) -> Vec<ElementRef> {
        self.nodes
            .iter()
            .map(|&v| ElementRef::Node(v))
            .chain(self.edges.iter().map(|&e| ElementRef::Edge(e)))
            .collect()
    }
}

impl From<&CandidateEvidenceGraph> for Subgraph {
    fn from(c: &CandidateEvidenceGraph) -> Self {
        Self {
            nodes: c.nodes.clone(),
            edges: c.edges.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OisrSolution {
    pub subgraph: Subgraph,
    pub phi: f64,
    pub feasible: bool,
}

fn check_closed(graph: &KnowledgeGraph, sub: &Subgraph) -> Result<(), OracleError> {
    for &e in &sub.edges {
        let rec = graph.edge(e);
        if !sub.nodes.contains(&rec.src) || !sub.nodes.contains(&rec.dst) {
            return Err(OracleError::LooseEdge(rec.id.clone()));
        }
    }
    Ok(())
}

/// Mean value over the nodes and edges of `sub`.
pub fn phi<V: ValueFn + ?Sized>(
    graph: &KnowledgeGraph,
    sub: &Subgraph,
    value: &V,
) -> Result<f64, OracleError> {
    if sub.is_empty() {
        return Err(OracleError::EmptySubgraph);
    }
    check_closed(graph, sub)?;
    let total: f64 = sub.elements().into_iter().map(|x| value.value(x)).sum();
    Ok(total / sub.len() as f64)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// True when `nodes` form one component under `edges` (both given as small
/// positional indices).
fn connected_positions(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    if n == 0 {
        return false;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut components = n;
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components == 1
}

pub fn is_connected(graph: &KnowledgeGraph, sub: &Subgraph) -> bool {
    if check_closed(graph, sub).is_err() {
        return false;
    }
    let nodes: Vec<NodeIdx> = sub.nodes.iter().copied().collect();
    let pos = |v: NodeIdx| nodes.binary_search(&v).expect("closed subgraph");
    connected_positions(
        nodes.len(),
        sub.edges.iter().map(|&e| {
            let rec = graph.edge(e);
            (pos(rec.src), pos(rec.dst))
        }),
    )
}

/// Connected and intersecting every anchor group.
pub fn is_feasible(graph: &KnowledgeGraph, sub: &Subgraph, anchors: &AnchorGroupSet) -> bool {
    is_connected(graph, sub) && anchors.coverage(sub.elements().iter()) == anchors.all_mask()
}

#[derive(Debug, Clone)]
struct Candidate {
    phi: f64,
    size: usize,
    keys: Vec<String>,
    sub: Subgraph,
}

fn better(a: &Candidate, b: &Candidate) -> Ordering {
    if (a.phi - b.phi).abs() > PHI_TIE {
        return b.phi.total_cmp(&a.phi);
    }
    a.size.cmp(&b.size).then_with(|| a.keys.cmp(&b.keys))
}

fn pick(a: Candidate, b: Candidate) -> Candidate {
    if better(&a, &b) == Ordering::Greater {
        b
    } else {
        a
    }
}

/// Exhaustive search over node subsets and, for each, over subsets of the
/// induced edges. Ties: higher Φ (within 1e-12), then fewer elements, then
/// lexicographically smaller element keys.
pub fn exact_oisr<V: ValueFn + Sync + ?Sized>(
    graph: &KnowledgeGraph,
    anchors: &AnchorGroupSet,
    value: &V,
    n_max: usize,
) -> Result<OisrSolution, OracleError> {
    let found = graph.node_count() + graph.edge_count();
    if found > n_max {
        return Err(OracleError::TooLarge {
            found,
            limit: n_max,
        });
    }
    let n = graph.node_count();
    let node_val: Vec<f64> = graph
        .node_indices()
        .map(|v| value.value(ElementRef::Node(v)))
        .collect();
    let edge_val: Vec<f64> = graph
        .edge_indices()
        .map(|e| value.value(ElementRef::Edge(e)))
        .collect();
    let node_mask: Vec<u64> = graph
        .node_indices()
        .map(|v| anchors.mask_of(ElementRef::Node(v)))
        .collect();
    let edge_mask: Vec<u64> = graph
        .edge_indices()
        .map(|e| anchors.mask_of(ElementRef::Edge(e)))
        .collect();
    let ends: Vec<(usize, usize)> = graph
        .edge_indices()
        .map(|e| (graph.edge(e).src.index(), graph.edge(e).dst.index()))
        .collect();
    let all = anchors.all_mask();

    let best_for = |set: u32| -> Option<Candidate> {
        let members: Vec<usize> = (0..n).filter(|i| set >> i & 1 == 1).collect();
        let pos = |v: usize| members.binary_search(&v).unwrap();
        let induced: Vec<usize> = (0..ends.len())
            .filter(|&e| set >> ends[e].0 & 1 == 1 && set >> ends[e].1 & 1 == 1)
            .collect();
        let node_cover = members.iter().fold(0, |m, &v| m | node_mask[v]);
        let full_cover = induced.iter().fold(node_cover, |m, &e| m | edge_mask[e]);
        if full_cover != all
            || !connected_positions(
                members.len(),
                induced.iter().map(|&e| (pos(ends[e].0), pos(ends[e].1))),
            )
        {
            return None;
        }
        let node_sum: f64 = members.iter().map(|&v| node_val[v]).sum();
        let mut best: Option<Candidate> = None;
        for pick_mask in 0u32..(1 << induced.len()) {
            let chosen: Vec<usize> = (0..induced.len())
                .filter(|i| pick_mask >> i & 1 == 1)
                .map(|i| induced[i])
                .collect();
            let cover = chosen.iter().fold(node_cover, |m, &e| m | edge_mask[e]);
            if cover != all
                || !connected_positions(
                    members.len(),
                    chosen.iter().map(|&e| (pos(ends[e].0), pos(ends[e].1))),
                )
            {
                continue;
            }
            let size = members.len() + chosen.len();
            let total = node_sum + chosen.iter().map(|&e| edge_val[e]).sum::<f64>();
            let sub = Subgraph::new(
                members.iter().map(|&v| NodeIdx(v as u32)),
                chosen.iter().map(|&e| EdgeIdx(e as u32)),
            );
            let mut keys: Vec<String> = sub
                .elements()
                .into_iter()
                .map(|x| graph.element_key(x))
                .collect();
            keys.sort();
            let cand = Candidate {
                phi: total / size as f64,
                size,
                keys,
                sub,
            };
            best = Some(match best {
                Some(b) => pick(b, cand),
                None => cand,
            });
        }
        best
    };

    let best = (1u32..(1u32 << n))
        .into_par_iter()
        .filter_map(best_for)
        .reduce_with(pick);
    Ok(match best {
        Some(c) => OisrSolution {
            phi: phi(graph, &c.sub, value)?,
            subgraph: c.sub,
            feasible: true,
        },
        None => OisrSolution {
            subgraph: Subgraph::default(),
            phi: f64::NAN,
            feasible: false,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceNode {
    pub id: String,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEdge {
    pub id: String,
    pub src: String,
    pub dst: String,
    pub val: f64,
}

/// Small OISR instance with explicit element values. Group members are
/// element keys (`n:<id>` / `e:<id>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInstance {
    pub nodes: Vec<InstanceNode>,
    #[serde(default)]
    pub edges: Vec<InstanceEdge>,
    pub groups: Vec<Vec<String>>,
}

pub struct OracleProblem {
    pub graph: KnowledgeGraph,
    pub anchors: AnchorGroupSet,
    pub values: ValueTable,
}

impl OracleInstance {
    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| OracleError::Parse(e.to_string()))
    }

    /// Builds a one-dimensional graph carrying the values in a side table,
    /// with uniformly weighted groups.
    pub fn build(&self) -> Result<OracleProblem, OracleError> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeLine {
                id: n.id.clone(),
                label: n.id.clone(),
                description: String::new(),
                embedding: vec![1.0],
                chunks: vec![],
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| EdgeLine {
                id: e.id.clone(),
                src: e.src.clone(),
                dst: e.dst.clone(),
                relation: "r".into(),
                text: String::new(),
                embedding: vec![1.0],
                chunks: vec![],
            })
            .collect();
        let graph = KnowledgeGraph::from_lines(nodes, edges, vec![], Some(1))?;
        let mut values = ValueTable::new(0.0);
        for n in &self.nodes {
            values.set(ElementRef::Node(graph.node_by_id(&n.id).unwrap()), n.val);
        }
        for e in &self.edges {
            values.set(ElementRef::Edge(graph.edge_by_id(&e.id).unwrap()), e.val);
        }
        let drafts = self
            .groups
            .iter()
            .enumerate()
            .map(|(i, keys)| {
                let members = keys
                    .iter()
                    .map(|k| graph.resolve_key(k))
                    .collect::<Result<BTreeSet<_>, _>>()?;
                Ok((format!("group{i}"), members, 1.0))
            })
            .collect::<Result<Vec<_>, GraphError>>()?;
        let query = QueryEmbedding::new("oracle", vec![1.0]).expect("unit");
        let anchors = AnchorGroupSet::from_weighted(query, drafts)?;
        Ok(OracleProblem {
            graph,
            anchors,
            values,
        })
    }
}

/// JSON printed by the `oracle` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub feasible: bool,
    pub phi: Option<f64>,
    pub nodes: Vec<String>,
    pub edges: Vec<String>,
}

impl OracleReport {
    pub fn new(graph: &KnowledgeGraph, sol: &OisrSolution) -> Self {
        Self {
            feasible: sol.feasible,
            phi: sol.feasible.then_some(sol.phi),
            nodes: sol
                .subgraph
                .nodes
                .iter()
                .map(|&v| graph.node(v).id.clone())
                .collect(),
            edges: sol
                .subgraph
                .edges
                .iter()
                .map(|&e| graph.edge(e).id.clone())
                .collect(),
        }
    }
}

pub fn solve_instance(
    instance: &OracleInstance,
    n_max: usize,
) -> Result<OracleReport, OracleError> {
    let p = instance.build()?;
    let sol = exact_oisr(&p.graph, &p.anchors, &p.values, n_max)?;
    Ok(OracleReport::new(&p.graph, &sol))
}
