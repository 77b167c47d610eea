//! Bubble Expansion: multi-source, cost-guided wavefront search from all
//! anchor groups at once. Wavefronts grow through query-aligned (low cost)
//! regions; where fronts of different groups meet, the per-group predecessor
//! paths are fused into a candidate evidence graph.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorGroupSet;
use crate::graph::{EdgeIdx, ElementRef, KnowledgeGraph, NodeIdx};
use crate::value::ValueFn;

#[derive(Debug, thiserror::Error)]
pub enum BubbleError {
    #[error("expansion budget must be at least 1")]
    ZeroBudget,
    #[error("expansion state inconsistent: {0}")]
    Invariant(String),
}

/// The h-hop union around all terminals, with the induced edge set.
///
/// Local node indices follow ascending node id, so tie-breaking on local
/// index is tie-breaking on id.
#[derive(Debug, Clone)]
pub struct LocalGraph<'g> {
    graph: &'g KnowledgeGraph,
    nodes: Vec<NodeIdx>,
    local_of: HashMap<NodeIdx, u32>,
    edges: Vec<EdgeIdx>,
    adjacency: Vec<Vec<(EdgeIdx, u32)>>,
    terminals: BTreeMap<NodeIdx, u64>,
    hops: usize,
}

/// Seed nodes of every group. An edge anchor seeds both of its endpoints.
pub fn seed_terminals(graph: &KnowledgeGraph, anchors: &AnchorGroupSet) -> BTreeMap<NodeIdx, u64> {
    let mut out: BTreeMap<NodeIdx, u64> = BTreeMap::new();
    for g in anchors.groups() {
        let bit = 1u64 << g.id;
        for &x in &g.members {
            match x {
                ElementRef::Node(v) => *out.entry(v).or_default() |= bit,
                ElementRef::Edge(e) => {
                    let rec = graph.edge(e);
                    *out.entry(rec.src).or_default() |= bit;
                    *out.entry(rec.dst).or_default() |= bit;
                }
            }
        }
    }
    out
}

pub fn localize<'g>(
    graph: &'g KnowledgeGraph,
    anchors: &AnchorGroupSet,
    h: usize,
) -> LocalGraph<'g> {
    let terminals = seed_terminals(graph, anchors);
    let mut depth: HashMap<NodeIdx, usize> = HashMap::new();
    let mut queue: VecDeque<NodeIdx> = VecDeque::new();
    for &t in terminals.keys() {
        depth.insert(t, 0);
        queue.push_back(t);
    }
    while let Some(v) = queue.pop_front() {
        let dv = depth[&v];
        if dv == h {
            continue;
        }
        for &e in graph.incident(v) {
            let u = graph.edge(e).opposite(v);
            if let std::collections::hash_map::Entry::Vacant(slot) = depth.entry(u) {
                slot.insert(dv + 1);
                queue.push_back(u);
            }
        }
    }

    let mut nodes: Vec<NodeIdx> = depth.into_keys().collect();
    nodes.sort_unstable();
    let local_of: HashMap<NodeIdx, u32> = nodes
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i as u32))
        .collect();
    let mut edge_set = BTreeSet::new();
    let adjacency = nodes
        .iter()
        .map(|&v| {
            let mut adj: Vec<(EdgeIdx, u32)> = graph
                .incident(v)
                .iter()
                .filter_map(|&e| {
                    let u = graph.edge(e).opposite(v);
                    local_of.get(&u).map(|&lu| (e, lu))
                })
                .collect();
            adj.sort_unstable();
            edge_set.extend(adj.iter().map(|a| a.0));
            adj
        })
        .collect();

    LocalGraph {
        graph,
        nodes,
        local_of,
        edges: edge_set.into_iter().collect(),
        adjacency,
        terminals,
        hops: h,
    }
}

impl<'g> LocalGraph<'g> {
    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.graph
    }

    pub fn nodes(&self) -> &[NodeIdx] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeIdx] {
        &self.edges
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn terminals(&self) -> &BTreeMap<NodeIdx, u64> {
        &self.terminals
    }

    pub fn contains_node(&self, v: NodeIdx) -> bool {
        self.local_of.contains_key(&v)
    }

    pub fn contains(&self, x: ElementRef) -> bool {
        match x {
            ElementRef::Node(v) => self.contains_node(v),
            ElementRef::Edge(e) => self.edges.binary_search(&e).is_ok(),
        }
    }

    pub fn element_count(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }

    fn local(&self, v: NodeIdx) -> Option<u32> {
        self.local_of.get(&v).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvidenceGraph {
    pub nodes: BTreeSet<NodeIdx>,
    pub edges: BTreeSet<EdgeIdx>,
    /// Meeting node; `None` for fallback candidates.
    pub steiner_node: Option<NodeIdx>,
    pub covered_groups: BTreeSet<usize>,
    pub intra_group_only: bool,
    pub is_fallback: bool,
    /// Sum of the per-group accumulated costs at the meeting node.
    pub discovery_cost: f64,
}

impl CandidateEvidenceGraph {
    fn new(
        nodes: BTreeSet<NodeIdx>,
        edges: BTreeSet<EdgeIdx>,
        steiner_node: Option<NodeIdx>,
        anchors: &AnchorGroupSet,
        is_fallback: bool,
        discovery_cost: f64,
    ) -> Self {
        let mask = anchors.coverage(
            nodes
                .iter()
                .map(|&v| ElementRef::Node(v))
                .chain(edges.iter().map(|&e| ElementRef::Edge(e)))
                .collect::<Vec<_>>()
                .iter(),
        );
        let covered_groups: BTreeSet<usize> =
            (0..anchors.len()).filter(|g| mask >> g & 1 == 1).collect();
        Self {
            intra_group_only: covered_groups.len() < 2,
            nodes,
            edges,
            steiner_node,
            covered_groups,
            is_fallback,
            discovery_cost,
        }
    }

    pub fn elements(&self) -> impl Iterator<Item = ElementRef> + '_ {
        self.nodes
            .iter()
            .map(|&v| ElementRef::Node(v))
            .chain(self.edges.iter().map(|&e| ElementRef::Edge(e)))
    }

    pub fn element_count(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }

    fn identity(&self) -> (Vec<NodeIdx>, Vec<EdgeIdx>) {
        (
            self.nodes.iter().copied().collect(),
            self.edges.iter().copied().collect(),
        )
    }

    pub fn dump(&self, graph: &KnowledgeGraph) -> CegDump {
        CegDump {
            nodes: self
                .nodes
                .iter()
                .map(|&v| graph.node(v).id.clone())
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&e| graph.edge(e).id.clone())
                .collect(),
            steiner_node: self.steiner_node.map(|v| graph.node(v).id.clone()),
            covered_groups: self.covered_groups.iter().copied().collect(),
            intra_group_only: self.intra_group_only,
            is_fallback: self.is_fallback,
            discovery_cost: self.discovery_cost,
        }
    }
}

/// Id-based JSON form of a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CegDump {
    pub nodes: Vec<String>,
    pub edges: Vec<String>,
    pub steiner_node: Option<String>,
    pub covered_groups: Vec<usize>,
    pub intra_group_only: bool,
    pub is_fallback: bool,
    pub discovery_cost: f64,
}

/// One candidate per anchor group. Edge anchors bring their endpoints.
pub fn fallback(graph: &KnowledgeGraph, anchors: &AnchorGroupSet) -> Vec<CandidateEvidenceGraph> {
    let mut out: Vec<CandidateEvidenceGraph> = Vec::new();
    let mut seen = HashSet::new();
    for g in anchors.groups() {
        let mut nodes = BTreeSet::new();
        let mut edges = BTreeSet::new();
        for &x in &g.members {
            match x {
                ElementRef::Node(v) => {
                    nodes.insert(v);
                }
                ElementRef::Edge(e) => {
                    edges.insert(e);
                    nodes.insert(graph.edge(e).src);
                    nodes.insert(graph.edge(e).dst);
                }
            }
        }
        let ceg = CandidateEvidenceGraph::new(nodes, edges, None, anchors, true, 0.0);
        if seen.insert(ceg.identity()) {
            out.push(ceg);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    node: u32,
    group: u8,
}

impl Eq for Entry {}

impl Ord for Entry {
    // reversed so the max-heap pops the smallest (cost, node, group)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
            .then_with(|| other.group.cmp(&self.group))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-node, per-group search state.
#[derive(Debug, Clone)]
pub struct ExpansionState {
    groups: usize,
    cost: Vec<f64>,
    pred: Vec<Option<(u32, EdgeIdx)>>,
    root: Vec<u32>,
    mask: Vec<u64>,
    nodes: Vec<NodeIdx>,
    local_of: HashMap<NodeIdx, u32>,
}

impl ExpansionState {
    fn new(local: &LocalGraph, groups: usize) -> Self {
        let n = local.nodes.len();
        Self {
            groups,
            cost: vec![f64::INFINITY; n * groups],
            pred: vec![None; n * groups],
            root: vec![u32::MAX; n * groups],
            mask: vec![0; n],
            nodes: local.nodes.clone(),
            local_of: local.local_of.clone(),
        }
    }

    fn at(&self, v: u32, g: usize) -> usize {
        v as usize * self.groups + g
    }

    /// Accumulated cost of `v` from group `g`, `None` if unreached.
    pub fn cost(&self, v: NodeIdx, g: usize) -> Option<f64> {
        let lv = *self.local_of.get(&v)?;
        let c = self.cost[self.at(lv, g)];
        c.is_finite().then_some(c)
    }

    pub fn mask(&self, v: NodeIdx) -> u64 {
        self.local_of
            .get(&v)
            .map_or(0, |&lv| self.mask[lv as usize])
    }

    /// Predecessor of `v` on its cheapest path from group `g`.
    pub fn pred(&self, v: NodeIdx, g: usize) -> Option<(NodeIdx, EdgeIdx)> {
        let lv = *self.local_of.get(&v)?;
        self.pred[self.at(lv, g)].map(|(p, e)| (self.nodes[p as usize], e))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionStats {
    pub pops: usize,
    pub stale_pops: usize,
    pub relaxations: usize,
    pub collision_events: usize,
    pub intra_events: usize,
    pub duplicates: usize,
    pub exhausted: bool,
    pub used_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct ExpansionOutcome {
    pub cegs: Vec<CandidateEvidenceGraph>,
    pub state: ExpansionState,
    pub stats: ExpansionStats,
}

/// Fuses the per-group predecessor paths from `meeting` into one candidate.
pub fn backtrace(
    state: &ExpansionState,
    local: &LocalGraph,
    anchors: &AnchorGroupSet,
    meeting: NodeIdx,
    groups: u64,
) -> Result<CandidateEvidenceGraph, BubbleError> {
    let lm = local.local(meeting).ok_or_else(|| {
        BubbleError::Invariant(format!("meeting node {meeting:?} outside local graph"))
    })?;
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeSet::new();
    let mut discovery = 0.0;
    for g in (0..state.groups).filter(|g| groups >> g & 1 == 1) {
        let c = state.cost[state.at(lm, g)];
        if !c.is_finite() {
            return Err(BubbleError::Invariant(format!(
                "group {g} unreached at meeting node {meeting:?}"
            )));
        }
        discovery += c;
        walk(state, local, anchors, lm, g, &mut nodes, &mut edges)?;
    }
    Ok(CandidateEvidenceGraph::new(
        nodes,
        edges,
        Some(meeting),
        anchors,
        false,
        discovery,
    ))
}

fn walk(
    state: &ExpansionState,
    local: &LocalGraph,
    anchors: &AnchorGroupSet,
    from: u32,
    g: usize,
    nodes: &mut BTreeSet<NodeIdx>,
    edges: &mut BTreeSet<EdgeIdx>,
) -> Result<(), BubbleError> {
    let mut cur = from;
    nodes.insert(local.nodes[cur as usize]);
    for _ in 0..=local.nodes.len() {
        match state.pred[state.at(cur, g)] {
            Some((p, e)) => {
                edges.insert(e);
                cur = p;
                nodes.insert(local.nodes[cur as usize]);
            }
            None => {
                let v = local.nodes[cur as usize];
                let is_terminal = local.terminals.get(&v).is_some_and(|m| m >> g & 1 == 1);
                return if is_terminal {
                    close_edge_anchor(local.graph, anchors, v, g, nodes, edges);
                    Ok(())
                } else {
                    Err(BubbleError::Invariant(format!(
                        "pred chain of group {g} ends at non-terminal {v:?}"
                    )))
                };
            }
        }
    }
    Err(BubbleError::Invariant(format!("pred cycle in group {g}")))
}

/// A root seeded only through an edge anchor pulls that edge (and its other
/// endpoint) in, so the candidate actually contains a member of the group.
fn close_edge_anchor(
    graph: &KnowledgeGraph,
    anchors: &AnchorGroupSet,
    v: NodeIdx,
    g: usize,
    nodes: &mut BTreeSet<NodeIdx>,
    edges: &mut BTreeSet<EdgeIdx>,
) {
    let members = &anchors.groups()[g].members;
    if members.contains(&ElementRef::Node(v)) {
        return;
    }
    if let Some(&e) = graph
        .incident(v)
        .iter()
        .find(|&&e| members.contains(&ElementRef::Edge(e)))
    {
        edges.insert(e);
        nodes.insert(graph.edge(e).opposite(v));
    }
}

/// Runs the search and returns candidates in discovery order.
///
/// Cross-group collisions are capped by `budget`. Intra-group connections
/// (two different terminals of one group meeting across an edge) are kept in
/// a separate pool and fill whatever room the collisions leave. When no
/// cross-group collision happens at all, the fallback candidates are
/// appended, one per group.
pub fn bubble_expand<V: ValueFn + ?Sized>(
    local: &LocalGraph,
    anchors: &AnchorGroupSet,
    value: &V,
    budget: usize,
) -> Result<Vec<CandidateEvidenceGraph>, BubbleError> {
    if budget == 0 {
        return Err(BubbleError::ZeroBudget);
    }
    Ok(run_expansion(local, anchors, value, Some(budget))?.cegs)
}

/// [`bubble_expand`] with full state and counters. `budget = None` runs until
/// the queue is exhausted.
pub fn run_expansion<V: ValueFn + ?Sized>(
    local: &LocalGraph,
    anchors: &AnchorGroupSet,
    value: &V,
    budget: Option<usize>,
) -> Result<ExpansionOutcome, BubbleError> {
    if budget == Some(0) {
        return Err(BubbleError::ZeroBudget);
    }
    let m = anchors.len();
    let mut state = ExpansionState::new(local, m);
    let mut stats = ExpansionStats::default();
    let mut node_cost: Vec<Option<f64>> = vec![None; local.nodes.len()];
    let mut heap = BinaryHeap::new();

    let mut collisions: Vec<CandidateEvidenceGraph> = Vec::new();
    let mut intra: Vec<CandidateEvidenceGraph> = Vec::new();
    let mut seen_ceg: HashSet<(Vec<NodeIdx>, Vec<EdgeIdx>)> = HashSet::new();
    let mut fired: HashSet<(u32, u64)> = HashSet::new();
    let mut intra_pairs: HashSet<(usize, u32, u32)> = HashSet::new();
    let cap = budget.unwrap_or(usize::MAX);

    let mut push_unique = |ceg: CandidateEvidenceGraph,
                           list: &mut Vec<CandidateEvidenceGraph>,
                           stats: &mut ExpansionStats| {
        if seen_ceg.insert(ceg.identity()) {
            list.push(ceg);
        } else {
            stats.duplicates += 1;
        }
    };

    for (&t, &tmask) in &local.terminals {
        let lt = local
            .local(t)
            .ok_or_else(|| BubbleError::Invariant(format!("terminal {t:?} outside local graph")))?;
        for g in (0..m).filter(|g| tmask >> g & 1 == 1) {
            let i = state.at(lt, g);
            state.cost[i] = 0.0;
            state.root[i] = lt;
            heap.push(Entry {
                cost: 0.0,
                node: lt,
                group: g as u8,
            });
        }
        state.mask[lt as usize] = tmask;
        if tmask.count_ones() >= 2 && collisions.len() < cap && fired.insert((lt, tmask)) {
            stats.collision_events += 1;
            let ceg = backtrace(&state, local, anchors, t, tmask)?;
            push_unique(ceg, &mut collisions, &mut stats);
        }
    }

    while collisions.len() < cap {
        let Some(Entry {
            cost: c,
            node: v,
            group,
        }) = heap.pop()
        else {
            stats.exhausted = true;
            break;
        };
        let g = group as usize;
        stats.pops += 1;
        if c > state.cost[state.at(v, g)] {
            stats.stale_pops += 1;
            continue;
        }
        let v_root = state.root[state.at(v, g)];
        for &(e, u) in &local.adjacency[v as usize] {
            if u == v {
                continue;
            }
            let iu = state.at(u, g);
            let cu = *node_cost[u as usize]
                .get_or_insert_with(|| value.cost(ElementRef::Node(local.nodes[u as usize])));
            let new_cost = c + cu;
            stats.relaxations += 1;

            let u_root = state.root[iu];
            if state.cost[iu].is_finite() && u_root != v_root && intra.len() < cap {
                let key = (g, v_root.min(u_root), v_root.max(u_root));
                if intra_pairs.insert(key) {
                    stats.intra_events += 1;
                    let mut nodes = BTreeSet::new();
                    let mut edges = BTreeSet::from([e]);
                    walk(&state, local, anchors, v, g, &mut nodes, &mut edges)?;
                    walk(&state, local, anchors, u, g, &mut nodes, &mut edges)?;
                    let ceg = CandidateEvidenceGraph::new(
                        nodes,
                        edges,
                        Some(local.nodes[u as usize]),
                        anchors,
                        false,
                        new_cost + state.cost[iu],
                    );
                    push_unique(ceg, &mut intra, &mut stats);
                }
            }

            if new_cost < state.cost[iu] {
                state.cost[iu] = new_cost;
                state.pred[iu] = Some((v, e));
                state.root[iu] = v_root;
                heap.push(Entry {
                    cost: new_cost,
                    node: u,
                    group,
                });
                let before = state.mask[u as usize];
                let after = before | 1u64 << g;
                state.mask[u as usize] = after;
                if after != before
                    && after.count_ones() >= 2
                    && collisions.len() < cap
                    && fired.insert((u, after))
                {
                    stats.collision_events += 1;
                    let ceg = backtrace(&state, local, anchors, local.nodes[u as usize], after)?;
                    push_unique(ceg, &mut collisions, &mut stats);
                }
            }
        }
    }

    let mut cegs = collisions;
    let cross_found = !cegs.is_empty();
    let room = cap.saturating_sub(cegs.len());
    cegs.extend(intra.into_iter().take(room));
    if !cross_found {
        stats.used_fallback = true;
        for f in fallback(local.graph, anchors) {
            push_unique(f, &mut cegs, &mut stats);
        }
    }
    Ok(ExpansionOutcome { cegs, state, stats })
}
