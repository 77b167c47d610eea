//! Decision oracle behind every language-model step of the pipeline.
//!
//! Callers build a [`ReasonerRequest`], a [`Reasoner`] produces a raw JSON
//! reply, and [`decide`] validates that reply against the request kind before
//! any field reaches the pipeline. Two reasoners ship here: a deterministic
//! [`MockReasoner`] driven by fixtures and built-in rules, and a
//! [`WireReasoner`] that forwards requests over the NDJSON transport.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::text::fallback_keywords;
use crate::wire::{WireClient, WireConfig, WireError};

/// Answer reported when the evidence does not support one.
pub const INSUFFICIENT_EVIDENCE: &str = "INSUFFICIENT_EVIDENCE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RequestKind {
    KeywordExtract,
    Specialize,
    Relax,
    Group,
    SufficiencyCheck,
    SelectNeighbors,
    GenerateAnswer,
}

/// A pooled anchor candidate offered for grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCandidate {
    /// Kind-qualified element key (`n:<id>` / `e:<id>`).
    pub key: String,
    pub keyword: String,
    pub text: String,
    pub similarity: f64,
}

/// An `(edge, opposite node)` unit on the expansion frontier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborOffer {
    pub id: String,
    pub relation: String,
    pub edge_text: String,
    /// Absent when the opposite node is already part of the evidence.
    pub node: Option<String>,
    pub node_label: Option<String>,
    pub similarity: f64,
}

pub type Triple = [String; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Payload {
    KeywordExtract {
        chunks: Vec<String>,
    },
    Specialize {
        keywords: Vec<String>,
    },
    Relax {
        keywords: Vec<String>,
        chunks: Vec<String>,
    },
    Group {
        keywords: Vec<String>,
        candidates: Vec<GroupCandidate>,
    },
    SufficiencyCheck {
        chunks: Vec<String>,
    },
    SelectNeighbors {
        hop: usize,
        evidence: Vec<Triple>,
        offers: Vec<NeighborOffer>,
    },
    GenerateAnswer {
        triples: Vec<Triple>,
        entities: Vec<String>,
        chunks: Vec<String>,
    },
}

impl Payload {
    pub fn kind(&self) -> RequestKind {
        match self {
            Payload::KeywordExtract { .. } => RequestKind::KeywordExtract,
            Payload::Specialize { .. } => RequestKind::Specialize,
            Payload::Relax { .. } => RequestKind::Relax,
            Payload::Group { .. } => RequestKind::Group,
            Payload::SufficiencyCheck { .. } => RequestKind::SufficiencyCheck,
            Payload::SelectNeighbors { .. } => RequestKind::SelectNeighbors,
            Payload::GenerateAnswer { .. } => RequestKind::GenerateAnswer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRequest {
    pub query: String,
    #[serde(flatten)]
    pub payload: Payload,
}

impl ReasonerRequest {
    pub fn new(query: impl Into<String>, payload: Payload) -> Self {
        Self {
            query: query.into(),
            payload,
        }
    }

    pub fn kind(&self) -> RequestKind {
        self.payload.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordItem {
    pub text: String,
    #[serde(default)]
    pub latent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupItem {
    pub concept: String,
    pub members: Vec<String>,
    pub weight: f64,
}

/// Validated, kind-matched reply content.
#[derive(Debug, Clone, PartialEq)]
pub enum ResponseBody {
    Keywords(Vec<KeywordItem>),
    Rewrites(BTreeMap<String, String>),
    Relaxations(BTreeMap<String, Vec<String>>),
    Groups(Vec<GroupItem>),
    Sufficiency {
        sufficient: bool,
        answer: Option<String>,
    },
    Selection {
        selected: Vec<String>,
        sufficient: bool,
    },
    Answer(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerResponse {
    pub body: ResponseBody,
    pub confidence: Option<f64>,
    pub raw: Option<String>,
}

/// Unvalidated reply as produced by a reasoner implementation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawReply {
    pub response: Value,
    pub confidence: Option<f64>,
    pub raw: Option<String>,
}

impl RawReply {
    pub fn new(response: Value) -> Self {
        Self {
            response,
            ..Self::default()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReasonerError {
    #[error("reasoner timed out after {0} ms")]
    Timeout(u64),
    #[error("reasoner transport failure: {0}")]
    Transport(String),
    #[error("malformed reasoner response at `{path}`: {message}")]
    Malformed { path: String, message: String },
    #[error("fixture error: {0}")]
    Fixture(String),
}

impl From<WireError> for ReasonerError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Timeout(ms) => ReasonerError::Timeout(ms),
            WireError::Malformed(m) => ReasonerError::Malformed {
                path: ".".into(),
                message: m,
            },
            other => ReasonerError::Transport(other.to_string()),
        }
    }
}

pub trait Reasoner: Send + Sync {
    fn respond(&self, req: &ReasonerRequest) -> Result<RawReply, ReasonerError>;
}

impl<T: Reasoner + ?Sized> Reasoner for &T {
    fn respond(&self, req: &ReasonerRequest) -> Result<RawReply, ReasonerError> {
        (**self).respond(req)
    }
}

impl<T: Reasoner + ?Sized> Reasoner for Box<T> {
    fn respond(&self, req: &ReasonerRequest) -> Result<RawReply, ReasonerError> {
        (**self).respond(req)
    }
}

impl<T: Reasoner + ?Sized> Reasoner for std::sync::Arc<T> {
    fn respond(&self, req: &ReasonerRequest) -> Result<RawReply, ReasonerError> {
        (**self).respond(req)
    }
}

/// Asks `reasoner` and validates the reply against the request kind.
pub fn decide<R: Reasoner + ?Sized>(
    reasoner: &R,
    req: &ReasonerRequest,
) -> Result<ReasonerResponse, ReasonerError> {
    let reply = reasoner.respond(req)?;
    let body = validate(req, reply.response)?;
    Ok(ReasonerResponse {
        body,
        confidence: reply.confidence,
        raw: reply.raw,
    })
}

fn malformed(path: impl Into<String>, message: impl Into<String>) -> ReasonerError {
    ReasonerError::Malformed {
        path: path.into(),
        message: message.into(),
    }
}

fn parse<T: DeserializeOwned>(value: Value) -> Result<T, ReasonerError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        malformed(path, e.into_inner().to_string())
    })
}

#[derive(Deserialize)]
struct KeywordsDoc {
    keywords: Vec<KeywordItem>,
}

#[derive(Deserialize)]
struct RewritesDoc {
    #[serde(default)]
    rewrites: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RelaxDoc {
    #[serde(default)]
    relaxed: BTreeMap<String, Vec<String>>,
}

#[derive(Deserialize)]
struct GroupsDoc {
    groups: Vec<GroupItem>,
}

#[derive(Deserialize)]
struct SufficiencyDoc {
    sufficient: bool,
    #[serde(default)]
    answer: Option<String>,
}

#[derive(Deserialize)]
struct SelectionDoc {
    selected: Vec<String>,
    #[serde(default)]
    sufficient: bool,
}

#[derive(Deserialize)]
struct AnswerDoc {
    answer: String,
}

/// Structural and referential validation of a reply for `req`.
pub fn validate(req: &ReasonerRequest, response: Value) -> Result<ResponseBody, ReasonerError> {
    if !response.is_object() {
        return Err(malformed(".", "response is not a JSON object"));
    }
    match &req.payload {
        Payload::KeywordExtract { .. } => {
            let doc: KeywordsDoc = parse(response)?;
            if doc.keywords.is_empty() {
                return Err(malformed("keywords", "empty keyword list"));
            }
            if let Some(i) = doc.keywords.iter().position(|k| k.text.trim().is_empty()) {
                return Err(malformed(format!("keywords[{i}].text"), "empty keyword"));
            }
            Ok(ResponseBody::Keywords(doc.keywords))
        }
        Payload::Specialize { .. } => {
            let doc: RewritesDoc = parse(response)?;
            if let Some((k, _)) = doc.rewrites.iter().find(|(_, v)| v.trim().is_empty()) {
                return Err(malformed(format!("rewrites.{k}"), "empty rewrite"));
            }
            Ok(ResponseBody::Rewrites(doc.rewrites))
        }
        Payload::Relax { .. } => {
            let doc: RelaxDoc = parse(response)?;
            for (k, vs) in &doc.relaxed {
                if let Some(i) = vs.iter().position(|v| v.trim().is_empty()) {
                    return Err(malformed(format!("relaxed.{k}[{i}]"), "empty relaxation"));
                }
            }
            Ok(ResponseBody::Relaxations(doc.relaxed))
        }
        Payload::Group { candidates, .. } => {
            let doc: GroupsDoc = parse(response)?;
            let known: HashSet<&str> = candidates.iter().map(|c| c.key.as_str()).collect();
            for (i, g) in doc.groups.iter().enumerate() {
                if !g.weight.is_finite() || g.weight < 0.0 {
                    return Err(malformed(
                        format!("groups[{i}].weight"),
                        "weight must be finite and non-negative",
                    ));
                }
                if let Some(j) = g.members.iter().position(|m| !known.contains(m.as_str())) {
                    return Err(malformed(
                        format!("groups[{i}].members[{j}]"),
                        format!("`{}` was not offered", g.members[j]),
                    ));
                }
            }
            Ok(ResponseBody::Groups(doc.groups))
        }
        Payload::SufficiencyCheck { .. } => {
            let doc: SufficiencyDoc = parse(response)?;
            if doc.sufficient && doc.answer.as_deref().is_none_or(|a| a.trim().is_empty()) {
                return Err(malformed("answer", "sufficient without an answer"));
            }
            Ok(ResponseBody::Sufficiency {
                sufficient: doc.sufficient,
                answer: doc.answer,
            })
        }
        Payload::SelectNeighbors { offers, .. } => {
            let doc: SelectionDoc = parse(response)?;
            let known: HashSet<&str> = offers.iter().map(|o| o.id.as_str()).collect();
            if let Some(i) = doc
                .selected
                .iter()
                .position(|s| !known.contains(s.as_str()))
            {
                return Err(malformed(
                    format!("selected[{i}]"),
                    format!("`{}` was not offered", doc.selected[i]),
                ));
            }
            Ok(ResponseBody::Selection {
                selected: doc.selected,
                sufficient: doc.sufficient,
            })
        }
        Payload::GenerateAnswer { .. } => {
            let doc: AnswerDoc = parse(response)?;
            Ok(ResponseBody::Answer(doc.answer))
        }
    }
}

#[derive(Debug, Deserialize)]
struct FixtureLine {
    kind: String,
    #[serde(default)]
    query: String,
    response: Value,
}

/// Deterministic reasoner: fixture replies keyed by `(kind, query)`, with
/// built-in rules for everything else.
#[derive(Debug, Clone)]
pub struct MockReasoner {
    fixtures: HashMap<(RequestKind, String), Value>,
    select_width: usize,
    select_min_similarity: Option<f64>,
}

impl Default for MockReasoner {
    fn default() -> Self {
        Self {
            fixtures: HashMap::new(),
            select_width: 2,
            select_min_similarity: None,
        }
    }
}

fn kind_from_str(s: &str) -> Option<RequestKind> {
    serde_json::from_value(Value::String(s.to_string())).ok()
}

impl MockReasoner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a fixture file. A line of kind `MockConfig` sets
    /// `select_width` / `select_min_similarity` for the neighbor rule.
    pub fn from_fixtures(path: &Path) -> Result<Self, ReasonerError> {
        let file = File::open(path)
            .map_err(|e| ReasonerError::Fixture(format!("{}: {e}", path.display())))?;
        let mut mock = Self::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ReasonerError::Fixture(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine = serde_json::from_str(&line).map_err(|e| {
                ReasonerError::Fixture(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            if rec.kind == "MockConfig" {
                if let Some(w) = rec.response.get("select_width").and_then(Value::as_u64) {
                    mock.select_width = w as usize;
                }
                if let Some(s) = rec
                    .response
                    .get("select_min_similarity")
                    .and_then(Value::as_f64)
                {
                    mock.select_min_similarity = Some(s);
                }
                continue;
            }
            let kind = kind_from_str(&rec.kind).ok_or_else(|| {
                ReasonerError::Fixture(format!(
                    "{}:{}: unknown kind `{}`",
                    path.display(),
                    i + 1,
                    rec.kind
                ))
            })?;
            mock.insert(kind, rec.query, rec.response);
        }
        Ok(mock)
    }

    /// Adds a fixture; a repeated key replaces the earlier reply.
    pub fn insert(&mut self, kind: RequestKind, query: impl Into<String>, response: Value) {
        let query = query.into();
        if self.fixtures.contains_key(&(kind, query.clone())) {
            tracing::warn!(?kind, %query, "duplicate fixture key, last entry wins");
        }
        self.fixtures.insert((kind, query), response);
    }

    pub fn with_fixture(mut self, kind: RequestKind, query: &str, response: Value) -> Self {
        self.insert(kind, query, response);
        self
    }

    pub fn with_select_width(mut self, width: usize) -> Self {
        self.select_width = width;
        self
    }

    pub fn select_width(&self) -> usize {
        self.select_width
    }

    pub fn fixture_count(&self) -> usize {
        self.fixtures.len()
    }

    fn rule(&self, req: &ReasonerRequest) -> Value {
        match &req.payload {
            Payload::KeywordExtract { .. } => {
                let kws: Vec<Value> = fallback_keywords(&req.query)
                    .into_iter()
                    .map(|t| json!({"text": t, "latent": false}))
                    .collect();
                json!({ "keywords": kws })
            }
            Payload::Specialize { .. } => json!({"rewrites": {}}),
            Payload::Relax { .. } => json!({"relaxed": {}}),
            Payload::Group {
                keywords,
                candidates,
            } => {
                let groups: Vec<Value> = keywords
                    .iter()
                    .filter_map(|kw| {
                        let members: Vec<&str> = candidates
                            .iter()
                            .filter(|c| &c.keyword == kw)
                            .map(|c| c.key.as_str())
                            .collect();
                        (!members.is_empty())
                            .then(|| json!({"concept": kw, "members": members, "weight": 1.0}))
                    })
                    .collect();
                json!({ "groups": groups })
            }
            Payload::SufficiencyCheck { .. } => json!({"sufficient": false}),
            Payload::SelectNeighbors { offers, .. } => {
                let mut ranked: Vec<&NeighborOffer> = offers
                    .iter()
                    .filter(|o| self.select_min_similarity.is_none_or(|m| o.similarity >= m))
                    .collect();
                ranked.sort_by(|a, b| {
                    b.similarity
                        .total_cmp(&a.similarity)
                        .then_with(|| a.id.cmp(&b.id))
                });
                let selected: Vec<&str> = ranked
                    .into_iter()
                    .take(self.select_width)
                    .map(|o| o.id.as_str())
                    .collect();
                json!({ "selected": selected })
            }
            Payload::GenerateAnswer { entities, .. } => {
                let answer = if entities.is_empty() {
                    INSUFFICIENT_EVIDENCE.to_string()
                } else {
                    entities.join("; ")
                };
                json!({ "answer": answer })
            }
        }
    }
}

impl Reasoner for MockReasoner {
    fn respond(&self, req: &ReasonerRequest) -> Result<RawReply, ReasonerError> {
        let Some(fixture) = self.fixtures.get(&(req.kind(), req.query.clone())) else {
            return Ok(RawReply::new(self.rule(req)));
        };
        let mut response = fixture.clone();
        // neighbor fixtures name ids across all hops; keep the ones on offer now
        if let Payload::SelectNeighbors { offers, .. } = &req.payload {
            if let Some(Value::Array(ids)) = response.get("selected") {
                let offered: HashSet<&str> = offers.iter().map(|o| o.id.as_str()).collect();
                let kept: Vec<Value> = ids
                    .iter()
                    .filter(|v| v.as_str().is_some_and(|s| offered.contains(s)))
                    .cloned()
                    .collect();
                response["selected"] = Value::Array(kept);
            }
        }
        Ok(RawReply::new(response))
    }
}

/// Forwards requests to an external process or socket over NDJSON.
///
/// Wire format: `{"id", "kind", "query", "payload"}` →
/// `{"id", "response", "confidence"?, "raw"?}`.
pub struct WireReasoner {
    client: WireClient,
}

impl WireReasoner {
    pub fn new(config: WireConfig) -> Result<Self, ReasonerError> {
        Ok(Self {
            client: WireClient::new(config)?,
        })
    }
}

impl Reasoner for WireReasoner {
    fn respond(&self, req: &ReasonerRequest) -> Result<RawReply, ReasonerError> {
        let Value::Object(body) = serde_json::to_value(req).expect("request serializes") else {
            unreachable!("requests serialize to objects")
        };
        let mut reply: Map<String, Value> = self.client.call(body)?;
        let response = reply
            .remove("response")
            .ok_or_else(|| malformed("response", "missing"))?;
        Ok(RawReply {
            response,
            confidence: reply.get("confidence").and_then(Value::as_f64),
            raw: reply.get("raw").and_then(Value::as_str).map(str::to_string),
        })
    }
}

/// Reasoner selection as it appears in run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReasonerConfig {
    Mock {
        #[serde(default)]
        fixtures: Option<std::path::PathBuf>,
    },
    External(WireConfig),
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig::Mock { fixtures: None }
    }
}

pub fn build_reasoner(config: &ReasonerConfig) -> Result<Box<dyn Reasoner>, ReasonerError> {
    Ok(match config {
        ReasonerConfig::Mock { fixtures: None } => Box::new(MockReasoner::new()),
        ReasonerConfig::Mock {
            fixtures: Some(path),
        } => Box::new(MockReasoner::from_fixtures(path)?),
        ReasonerConfig::External(wire) => Box::new(WireReasoner::new(wire.clone())?),
    })
}
