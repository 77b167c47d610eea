//! From query text to weighted anchor groups.
//!
//! Stages run in order: chunk pre-retrieval and the sufficiency gate, keyword
//! extraction (explicit plus latent concepts), specialization of
//! underspecified keywords, schema relaxation guided by the retrieved chunks,
//! similarity grounding into the graph, and grouping with importance weights.
//! Every reasoner-backed stage degrades to a deterministic local rule when the
//! reasoner fails.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingProvider;
use crate::graph::{ChunkIdx, ChunkRecord, ElementRef, KnowledgeGraph, Scope};
use crate::reasoner::{decide, GroupCandidate, Payload, Reasoner, ReasonerRequest, ResponseBody};
use crate::text::fallback_keywords;
use crate::value::{cosine, QueryEmbedding};

/// Groups are tracked in a `u64` bitmask during search.
pub const MAX_GROUPS: usize = 64;

/// Candidates below this cosine never become anchors.
pub const GROUNDING_FLOOR: f64 = 0.0;

const WEIGHT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum AnchorError {
    #[error("no anchors grounded")]
    NoAnchors,
    #[error("anchor group `{0}` has no members")]
    EmptyGroup(String),
    #[error("invalid weight {weight} for group `{concept}`")]
    BadWeight { concept: String, weight: f64 },
    #[error("too many anchor groups ({0}, max {MAX_GROUPS})")]
    TooManyGroups(usize),
    #[error("anchor weights sum to {0}, expected 1")]
    Unnormalized(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordOrigin {
    Explicit,
    Latent,
    Specialized,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyword {
    pub text: String,
    pub origin: KeywordOrigin,
    pub parent: Option<String>,
}

impl Keyword {
    pub fn explicit(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            origin: KeywordOrigin::Explicit,
            parent: None,
        }
    }

    pub fn latent(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            origin: KeywordOrigin::Latent,
            parent: None,
        }
    }

    fn derived(text: impl Into<String>, origin: KeywordOrigin, parent: &str) -> Self {
        Self {
            text: text.into(),
            origin,
            parent: Some(parent.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGroup {
    pub id: usize,
    pub concept_label: String,
    pub members: BTreeSet<ElementRef>,
    pub weight: f64,
}

/// Weighted anchor groups for one query. Weights always sum to one.
#[derive(Debug, Clone)]
pub struct AnchorGroupSet {
    groups: Vec<AnchorGroup>,
    query: QueryEmbedding,
    membership: HashMap<ElementRef, u64>,
}

impl AnchorGroupSet {
    /// Builds groups from `(concept, members, relative weight)` triples.
    ///
    /// Weights are normalized here; a zero total falls back to uniform.
    pub fn from_weighted(
        query: QueryEmbedding,
        drafts: Vec<(String, BTreeSet<ElementRef>, f64)>,
    ) -> Result<Self, AnchorError> {
        if drafts.is_empty() {
            return Err(AnchorError::NoAnchors);
        }
        if drafts.len() > MAX_GROUPS {
            return Err(AnchorError::TooManyGroups(drafts.len()));
        }
        for (concept, members, weight) in &drafts {
            if members.is_empty() {
                return Err(AnchorError::EmptyGroup(concept.clone()));
            }
            if !weight.is_finite() || *weight < 0.0 {
                return Err(AnchorError::BadWeight {
                    concept: concept.clone(),
                    weight: *weight,
                });
            }
        }
        let total: f64 = drafts.iter().map(|d| d.2).sum();
        let m = drafts.len() as f64;
        let groups = drafts
            .into_iter()
            .enumerate()
            .map(|(id, (concept_label, members, w))| AnchorGroup {
                id,
                concept_label,
                members,
                weight: if total > 0.0 { w / total } else { 1.0 / m },
            })
            .collect();
        Self::new(query, groups)
    }

    /// Validates already-normalized groups. Group ids must equal positions.
    pub fn new(query: QueryEmbedding, groups: Vec<AnchorGroup>) -> Result<Self, AnchorError> {
        if groups.is_empty() {
            return Err(AnchorError::NoAnchors);
        }
        if groups.len() > MAX_GROUPS {
            return Err(AnchorError::TooManyGroups(groups.len()));
        }
        let mut membership: HashMap<ElementRef, u64> = HashMap::new();
        let mut total = 0.0;
        for (i, g) in groups.iter().enumerate() {
            assert_eq!(g.id, i, "anchor group ids are positional");
            if g.members.is_empty() {
                return Err(AnchorError::EmptyGroup(g.concept_label.clone()));
            }
            if !(0.0..=1.0).contains(&g.weight) {
                return Err(AnchorError::BadWeight {
                    concept: g.concept_label.clone(),
                    weight: g.weight,
                });
            }
            total += g.weight;
            for &x in &g.members {
                *membership.entry(x).or_default() |= 1u64 << i;
            }
        }
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(AnchorError::Unnormalized(total));
        }
        Ok(Self {
            groups,
            query,
            membership,
        })
    }

    pub fn groups(&self) -> &[AnchorGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn query(&self) -> &QueryEmbedding {
        &self.query
    }

    pub fn weight(&self, group: usize) -> f64 {
        self.groups[group].weight
    }

    /// Bitmask of the groups containing `x`.
    pub fn mask_of(&self, x: ElementRef) -> u64 {
        self.membership.get(&x).copied().unwrap_or(0)
    }

    pub fn all_mask(&self) -> u64 {
        if self.groups.len() == 64 {
            u64::MAX
        } else {
            (1u64 << self.groups.len()) - 1
        }
    }

    /// Coverage mask of a set of elements.
    pub fn coverage<'a>(&self, elements: impl IntoIterator<Item = &'a ElementRef>) -> u64 {
        elements.into_iter().fold(0, |m, x| m | self.mask_of(*x))
    }
}

/// Lazily computed chunk embeddings, shared across queries on one bundle.
pub struct ChunkVectors {
    cache: Vec<OnceLock<Option<Vec<f64>>>>,
}

impl ChunkVectors {
    pub fn new(graph: &KnowledgeGraph) -> Self {
        Self {
            cache: (0..graph.chunk_count()).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Embedding of chunk `c`, or `None` when the provider cannot embed it.
    pub fn get(
        &self,
        graph: &KnowledgeGraph,
        provider: &dyn EmbeddingProvider,
        c: ChunkIdx,
    ) -> Option<&[f64]> {
        self.cache[c.index()]
            .get_or_init(|| match provider.embed(&graph.chunk(c).text) {
                Ok(v) if v.len() == graph.dim() => Some(v),
                Ok(v) => {
                    tracing::warn!(chunk = %graph.chunk(c).id, dim = v.len(), "chunk embedding has wrong dimension");
                    None
                }
                Err(e) => {
                    tracing::warn!(chunk = %graph.chunk(c).id, error = %e, "chunk not embeddable");
                    None
                }
            })
            .as_deref()
    }

    pub fn similarity(
        &self,
        graph: &KnowledgeGraph,
        provider: &dyn EmbeddingProvider,
        c: ChunkIdx,
        query: &QueryEmbedding,
    ) -> Option<f64> {
        self.get(graph, provider, c)
            .map(|v| cosine(&query.vector, v))
    }
}

/// Top-`k` chunks by cosine to the query, descending; ties by chunk id.
pub fn pre_retrieve(
    graph: &KnowledgeGraph,
    vectors: &ChunkVectors,
    provider: &dyn EmbeddingProvider,
    query: &QueryEmbedding,
    k: usize,
) -> Vec<(ChunkIdx, f64)> {
    let mut scored: Vec<(ChunkIdx, f64)> = graph
        .chunk_indices()
        .filter_map(|c| {
            vectors
                .similarity(graph, provider, c, query)
                .map(|s| (c, s))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Gate {
    Answer(String),
    Insufficient,
}

fn chunk_texts(chunks: &[&ChunkRecord]) -> Vec<String> {
    chunks.iter().map(|c| c.text.clone()).collect()
}

/// Asks whether the pre-retrieved chunks already answer the query.
pub fn sufficiency_gate<R: Reasoner + ?Sized>(
    reasoner: &R,
    query: &str,
    chunks: &[&ChunkRecord],
) -> Gate {
    let req = ReasonerRequest::new(
        query,
        Payload::SufficiencyCheck {
            chunks: chunk_texts(chunks),
        },
    );
    match decide(reasoner, &req) {
        Ok(resp) => match resp.body {
            ResponseBody::Sufficiency {
                sufficient: true,
                answer: Some(a),
            } => Gate::Answer(a),
            _ => Gate::Insufficient,
        },
        Err(e) => {
            tracing::warn!(error = %e, "sufficiency check failed, continuing with graph retrieval");
            Gate::Insufficient
        }
    }
}

/// Explicit and latent keywords; the capitalized/quoted-span rule on failure.
pub fn extract_keywords<R: Reasoner + ?Sized>(
    reasoner: &R,
    query: &str,
    context: &[&ChunkRecord],
) -> Vec<Keyword> {
    let req = ReasonerRequest::new(
        query,
        Payload::KeywordExtract {
            chunks: chunk_texts(context),
        },
    );
    let mut out = match decide(reasoner, &req) {
        Ok(resp) => match resp.body {
            ResponseBody::Keywords(items) => items
                .into_iter()
                .map(|k| {
                    let text = k.text.trim().to_string();
                    if k.latent {
                        Keyword::latent(text)
                    } else {
                        Keyword::explicit(text)
                    }
                })
                .collect(),
            _ => Vec::new(),
        },
        Err(e) => {
            tracing::warn!(error = %e, "keyword extraction failed, using span rule");
            Vec::new()
        }
    };
    if out.is_empty() {
        out = fallback_keywords(query)
            .into_iter()
            .map(Keyword::explicit)
            .collect();
    }
    let mut seen = HashSet::new();
    out.retain(|k| seen.insert(k.text.clone()));
    out
}

/// Rewrites underspecified keywords into query-bound constraints.
///
/// Each keyword maps to itself or to one specialized child whose `parent`
/// names it. Reasoner failure is an identity pass.
pub fn specialize_anchors<R: Reasoner + ?Sized>(
    reasoner: &R,
    keywords: &[Keyword],
    query: &str,
) -> Vec<Keyword> {
    let req = ReasonerRequest::new(
        query,
        Payload::Specialize {
            keywords: keywords.iter().map(|k| k.text.clone()).collect(),
        },
    );
    let rewrites = match decide(reasoner, &req) {
        Ok(resp) => match resp.body {
            ResponseBody::Rewrites(map) => map,
            _ => Default::default(),
        },
        Err(e) => {
            tracing::warn!(error = %e, "specialization failed, keeping keywords");
            Default::default()
        }
    };
    keywords
        .iter()
        .map(|k| match rewrites.get(&k.text) {
            Some(new) if new.trim() != k.text => {
                Keyword::derived(new.trim(), KeywordOrigin::Specialized, &k.text)
            }
            _ => k.clone(),
        })
        .collect()
}

/// Appends relaxed variants of schema-sensitive keywords. Originals are kept.
/// Without context chunks there is no evidence to relax on.
pub fn relax_schema<R: Reasoner + ?Sized>(
    reasoner: &R,
    keywords: &[Keyword],
    context: &[&ChunkRecord],
    query: &str,
) -> Vec<Keyword> {
    let mut out = keywords.to_vec();
    if context.is_empty() {
        return out;
    }
    let req = ReasonerRequest::new(
        query,
        Payload::Relax {
            keywords: keywords.iter().map(|k| k.text.clone()).collect(),
            chunks: chunk_texts(context),
        },
    );
    let relaxed = match decide(reasoner, &req) {
        Ok(resp) => match resp.body {
            ResponseBody::Relaxations(map) => map,
            _ => return out,
        },
        Err(e) => {
            tracing::warn!(error = %e, "schema relaxation failed, skipping");
            return out;
        }
    };
    let mut seen: HashSet<String> = out.iter().map(|k| k.text.clone()).collect();
    for k in keywords {
        for variant in relaxed.get(&k.text).into_iter().flatten() {
            let variant = variant.trim();
            if seen.insert(variant.to_string()) {
                out.push(Keyword::derived(variant, KeywordOrigin::Relaxed, &k.text));
            }
        }
    }
    out
}

/// Candidate pool of one keyword.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordPool {
    pub keyword: Keyword,
    pub candidates: Vec<(ElementRef, f64)>,
}

/// Per-keyword top-`k` nodes and edges by cosine, with the grounding floor
/// applied. A keyword that cannot be embedded gets an empty pool.
pub fn ground_keywords(
    graph: &KnowledgeGraph,
    provider: &dyn EmbeddingProvider,
    keywords: &[Keyword],
    k: usize,
) -> Vec<KeywordPool> {
    keywords
        .iter()
        .map(|kw| {
            let candidates = match provider.embed(&kw.text) {
                Ok(v) => match graph.top_k_similar(&v, k.max(1), Scope::Both) {
                    Ok(top) => top
                        .into_iter()
                        .filter(|(_, s)| *s >= GROUNDING_FLOOR)
                        .collect(),
                    Err(e) => {
                        tracing::warn!(keyword = %kw.text, error = %e, "grounding failed");
                        Vec::new()
                    }
                },
                Err(e) => {
                    tracing::warn!(keyword = %kw.text, error = %e, "keyword not embeddable");
                    Vec::new()
                }
            };
            KeywordPool {
                keyword: kw.clone(),
                candidates,
            }
        })
        .collect()
}

/// Keeps each element in only the heaviest group claiming it; ties go to the
/// earlier group. Groups left empty are dropped.
fn dedupe_members(
    drafts: Vec<(String, Vec<ElementRef>, f64)>,
) -> Vec<(String, BTreeSet<ElementRef>, f64)> {
    let mut owner: HashMap<ElementRef, usize> = HashMap::new();
    for (i, (_, members, w)) in drafts.iter().enumerate() {
        for &x in members {
            match owner.get(&x) {
                Some(&j) if drafts[j].2 >= *w => {}
                _ => {
                    owner.insert(x, i);
                }
            }
        }
    }
    drafts
        .into_iter()
        .enumerate()
        .map(|(i, (c, members, w))| {
            let kept = members
                .into_iter()
                .filter(|x| owner.get(x) == Some(&i))
                .collect::<BTreeSet<_>>();
            (c, kept, w)
        })
        .filter(|(_, m, _)| !m.is_empty())
        .collect()
}

/// Clusters pooled candidates into concept groups with normalized weights.
///
/// On reasoner failure every keyword with a nonempty pool becomes its own
/// group with uniform weight.
pub fn group_anchors<R: Reasoner + ?Sized>(
    reasoner: &R,
    graph: &KnowledgeGraph,
    query: &QueryEmbedding,
    pools: &[KeywordPool],
) -> Result<AnchorGroupSet, AnchorError> {
    if pools.iter().all(|p| p.candidates.is_empty()) {
        return Err(AnchorError::NoAnchors);
    }
    let candidates: Vec<GroupCandidate> = pools
        .iter()
        .flat_map(|p| {
            p.candidates.iter().map(|&(x, s)| GroupCandidate {
                key: graph.element_key(x),
                keyword: p.keyword.text.clone(),
                text: graph.element_text(x).to_string(),
                similarity: s,
            })
        })
        .collect();
    let req = ReasonerRequest::new(
        query.source_text.clone(),
        Payload::Group {
            keywords: pools.iter().map(|p| p.keyword.text.clone()).collect(),
            candidates,
        },
    );

    let from_reasoner = match decide(reasoner, &req) {
        Ok(resp) => match resp.body {
            ResponseBody::Groups(items) => {
                let drafts = items
                    .into_iter()
                    .map(|g| {
                        let members = g
                            .members
                            .iter()
                            .filter_map(|key| graph.resolve_key(key).ok())
                            .collect();
                        (g.concept, members, g.weight)
                    })
                    .collect();
                let drafts = dedupe_members(drafts);
                if drafts.is_empty() || drafts.iter().all(|d| d.2 == 0.0) {
                    tracing::warn!("reasoner grouping unusable, using one group per keyword");
                    None
                } else {
                    Some(drafts)
                }
            }
            _ => None,
        },
        Err(e) => {
            tracing::warn!(error = %e, "anchor grouping failed, using one group per keyword");
            None
        }
    };

    let drafts = match from_reasoner {
        Some(d) => d,
        None => dedupe_members(
            pools
                .iter()
                .filter(|p| !p.candidates.is_empty())
                .map(|p| {
                    (
                        p.keyword.text.clone(),
                        p.candidates.iter().map(|c| c.0).collect(),
                        1.0,
                    )
                })
                .collect(),
        ),
    };
    AnchorGroupSet::from_weighted(query.clone(), drafts)
}
