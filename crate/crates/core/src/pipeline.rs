//! End-to-end query: pre-retrieval, sufficiency gate, anchors, bubble
//! search, ranking, reasoning expansion, merge, context, answer.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::anchor::{
    extract_keywords, ground_keywords, group_anchors, pre_retrieve, relax_schema,
    specialize_anchors, sufficiency_gate, AnchorError, AnchorGroupSet, ChunkVectors, Gate, Keyword,
};
use crate::bubble::{localize, run_expansion, BubbleError, CandidateEvidenceGraph, ExpansionStats};
use crate::config::RunConfig;
use crate::embedding::{EmbedError, EmbeddingProvider};
use crate::expand::{
    assemble_context, entity_labels, generate_answer, merge, reasoning_expand, ExpandedCeg,
    HybridContext, UnifiedEvidenceGraph,
};
use crate::graph::{ChunkRecord, GraphError, KnowledgeGraph};
use crate::rank::{rank, RankError, ScoredCeg};
use crate::reasoner::Reasoner;
use crate::value::{QueryEmbedding, ValueModel};

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("query cannot be embedded: {0}")]
    Embed(#[from] EmbedError),
    #[error("query embedding is degenerate")]
    DegenerateQuery,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Anchors(#[from] AnchorError),
    #[error(transparent)]
    Bubble(#[from] BubbleError),
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// Everything a query needs, borrowed.
pub struct QueryContext<'a> {
    pub graph: &'a KnowledgeGraph,
    pub chunk_vectors: &'a ChunkVectors,
    pub provider: &'a dyn EmbeddingProvider,
    pub reasoner: &'a dyn Reasoner,
    pub config: &'a RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub ms: f64,
}

/// Lap timer: each stage is charged the time since the previous lap, so the
/// stages add up to the total.
#[derive(Debug, Clone)]
pub struct Timings {
    start: Instant,
    last: Instant,
    stages: Vec<(&'static str, Duration)>,
}

impl Default for Timings {
    fn default() -> Self {
        Self::new()
    }
}

impl Timings {
    pub fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            stages: Vec::new(),
        }
    }

    pub fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        self.stages.push((stage, now - self.last));
        self.last = now;
    }

    pub fn stages(&self) -> Vec<StageTime> {
        self.stages
            .iter()
            .map(|(s, d)| StageTime {
                stage: s.to_string(),
                ms: d.as_secs_f64() * 1e3,
            })
            .collect()
    }

    pub fn stage(&self, name: &str) -> Duration {
        self.stages
            .iter()
            .filter(|(s, _)| *s == name)
            .map(|(_, d)| *d)
            .sum()
    }

    /// Wall time from creation to the last lap.
    pub fn total(&self) -> Duration {
        self.last - self.start
    }
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub query: QueryEmbedding,
    pub answer: String,
    pub answer_degraded: bool,
    pub gated: bool,
    pub pre_retrieved: Vec<ChunkRecord>,
    pub keywords: Vec<Keyword>,
    pub anchors: Option<AnchorGroupSet>,
    pub cegs: Vec<CandidateEvidenceGraph>,
    pub stats: ExpansionStats,
    pub ranked: Vec<ScoredCeg>,
    pub expanded: Vec<ExpandedCeg>,
    pub merged: UnifiedEvidenceGraph,
    pub context: HybridContext,
    pub timings: Timings,
}

pub fn embed_query(
    provider: &dyn EmbeddingProvider,
    graph: &KnowledgeGraph,
    text: &str,
) -> Result<QueryEmbedding, QueryError> {
    let v = provider.embed(text)?;
    if v.len() != graph.dim() {
        return Err(GraphError::DimensionMismatch {
            what: "query embedding".into(),
            expected: graph.dim(),
            found: v.len(),
        }
        .into());
    }
    QueryEmbedding::new(text, v).ok_or(QueryError::DegenerateQuery)
}

pub fn run_query(ctx: &QueryContext, text: &str) -> Result<QueryOutcome, QueryError> {
    let mut timings = Timings::new();
    let query = embed_query(ctx.provider, ctx.graph, text)?;
    timings.lap("embed_query");

    let pre: Vec<ChunkRecord> = pre_retrieve(
        ctx.graph,
        ctx.chunk_vectors,
        ctx.provider,
        &query,
        ctx.config.k_chunks,
    )
    .into_iter()
    .map(|(c, _)| ctx.graph.chunk(c).clone())
    .collect();
    timings.lap("pre_retrieve");
    let pre_refs: Vec<&ChunkRecord> = pre.iter().collect();

    let gate = sufficiency_gate(ctx.reasoner, text, &pre_refs);
    timings.lap("sufficiency_gate");
    if let Gate::Answer(answer) = gate {
        let context = HybridContext {
            triples: Vec::new(),
            chunks: pre.clone(),
        };
        return Ok(QueryOutcome {
            query,
            answer,
            answer_degraded: false,
            gated: true,
            pre_retrieved: pre,
            keywords: Vec::new(),
            anchors: None,
            cegs: Vec::new(),
            stats: ExpansionStats::default(),
            ranked: Vec::new(),
            expanded: Vec::new(),
            merged: UnifiedEvidenceGraph::default(),
            context,
            timings,
        });
    }

    let keywords = extract_keywords(ctx.reasoner, text, &pre_refs);
    timings.lap("keywords");
    let keywords = specialize_anchors(ctx.reasoner, &keywords, text);
    timings.lap("specialize");
    let keywords = relax_schema(ctx.reasoner, &keywords, &pre_refs, text);
    timings.lap("relax");
    let pools = ground_keywords(ctx.graph, ctx.provider, &keywords, ctx.config.k_per_keyword);
    timings.lap("ground");
    let anchors = group_anchors(ctx.reasoner, ctx.graph, &query, &pools)?;
    timings.lap("group");

    let mut outcome = retrieve(ctx, query, anchors, pre.len(), timings)?;
    outcome.pre_retrieved = pre;
    outcome.keywords = keywords;
    Ok(outcome)
}

/// The graph half of the pipeline, from given anchors onward.
pub fn run_with_anchors(
    ctx: &QueryContext,
    query: QueryEmbedding,
    anchors: AnchorGroupSet,
) -> Result<QueryOutcome, QueryError> {
    retrieve(ctx, query, anchors, 0, Timings::new())
}

fn retrieve(
    ctx: &QueryContext,
    query: QueryEmbedding,
    anchors: AnchorGroupSet,
    chunks_spent: usize,
    mut timings: Timings,
) -> Result<QueryOutcome, QueryError> {
    let config = ctx.config;
    let value = ValueModel::new(ctx.graph, query.clone())?;
    let local = localize(ctx.graph, &anchors, config.hops);
    timings.lap("localize");
    let expansion = run_expansion(&local, &anchors, &value, Some(config.budget))?;
    timings.lap("bubble_expand");
    let ranked = rank(&expansion.cegs, &anchors, &value, &config.rank_params())?;
    timings.lap("rank");
    let expand_params = config.expand_params();
    let expanded: Vec<ExpandedCeg> = ranked
        .iter()
        .map(|s| {
            reasoning_expand(
                ctx.graph,
                s,
                ctx.reasoner,
                &value,
                &expand_params,
                &query.source_text,
            )
        })
        .collect();
    timings.lap("reasoning_expand");
    let merged = merge(&expanded);
    timings.lap("merge");
    let context = assemble_context(
        ctx.graph,
        &merged,
        config.final_chunk_budget(chunks_spent),
        &query,
        ctx.chunk_vectors,
        ctx.provider,
    );
    timings.lap("assemble");
    let entities = entity_labels(ctx.graph, &merged);
    let generated = generate_answer(ctx.reasoner, &query.source_text, &context, &entities);
    timings.lap("generate");

    Ok(QueryOutcome {
        query,
        answer: generated.answer,
        answer_degraded: generated.degraded,
        gated: false,
        pre_retrieved: Vec::new(),
        keywords: Vec::new(),
        anchors: Some(anchors),
        cegs: expansion.cegs,
        stats: expansion.stats,
        ranked,
        expanded,
        merged,
        context,
        timings,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFlags {
    #[serde(default)]
    pub dump_cegs: bool,
    #[serde(default)]
    pub explain: bool,
    #[serde(default)]
    pub emit_context: bool,
}

pub fn cegs_json(graph: &KnowledgeGraph, outcome: &QueryOutcome) -> Value {
    json!(outcome
        .cegs
        .iter()
        .map(|c| c.dump(graph))
        .collect::<Vec<_>>())
}

pub fn explain_json(graph: &KnowledgeGraph, outcome: &QueryOutcome) -> Value {
    let anchors: Vec<Value> = outcome
        .anchors
        .iter()
        .flat_map(|a| a.groups())
        .map(|g| {
            json!({
                "id": g.id,
                "concept": g.concept_label,
                "weight": g.weight,
                "members": g.members.iter().map(|&x| graph.element_key(x)).collect::<Vec<_>>(),
            })
        })
        .collect();
    let expansion: Vec<Value> = outcome
        .expanded
        .iter()
        .map(|x| {
            let hops: Vec<Value> = x
                .hops
                .iter()
                .map(|h| {
                    json!({
                        "nodes": h.nodes.iter().map(|&v| graph.node(v).id.clone()).collect::<Vec<_>>(),
                        "edges": h.edges.iter().map(|&e| graph.edge(e).id.clone()).collect::<Vec<_>>(),
                    })
                })
                .collect();
            json!({"terminated": x.terminated, "hops": hops})
        })
        .collect();
    json!({
        "gated": outcome.gated,
        "keywords": outcome.keywords,
        "anchors": anchors,
        "ranked": outcome.ranked.iter().map(|s| s.dump(graph)).collect::<Vec<_>>(),
        "expansion": expansion,
        "stats": outcome.stats,
    })
}

pub fn context_json(outcome: &QueryOutcome) -> Value {
    json!(outcome.context)
}

/// Answer on the first line, then one `# <section>` header and a compact
/// JSON line per requested artifact. Contains nothing time-dependent.
pub fn render_output(graph: &KnowledgeGraph, outcome: &QueryOutcome, flags: OutputFlags) -> String {
    let mut out = String::new();
    out.push_str(&outcome.answer);
    out.push('\n');
    let mut section = |name: &str, v: Value| {
        out.push_str("# ");
        out.push_str(name);
        out.push('\n');
        out.push_str(&v.to_string());
        out.push('\n');
    };
    if flags.dump_cegs {
        section("cegs", cegs_json(graph, outcome));
    }
    if flags.explain {
        section("explain", explain_json(graph, outcome));
    }
    if flags.emit_context {
        section("context", context_json(outcome));
    }
    out
}
