//! Request and response bodies of the HTTP service, and the operations
//! behind them. The CLI, the server and the client all share these types.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorError;
use crate::bundle::{self, Bundle, BundleError, Manifest};
use crate::config::RunConfig;
use crate::embedding::build_provider;
use crate::eval::{run_suite, EvalError, EvalReport, SuiteSpec};
use crate::oracle::{solve_instance, OracleInstance, OracleReport};
use crate::pipeline::{render_output, run_query, OutputFlags, QueryContext, QueryError, StageTime};
use crate::reasoner::build_reasoner;
use crate::synth::{synth_kg, GroundTruth, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRequest {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub chunks: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub bundle: PathBuf,
    #[serde(default)]
    pub config: RunConfig,
    pub query: String,
    #[serde(default)]
    pub flags: OutputFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub answer: String,
    /// Rendered standard output of the query command.
    pub output: String,
    pub gated: bool,
    pub degraded: bool,
    pub timings: Vec<StageTime>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRequest {
    #[serde(default)]
    pub spec: SyntheticSpec,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthResponse {
    pub manifest: Manifest,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub suite: SuiteSpec,
    /// Also write the report here, pretty-printed.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleRequest {
    pub instance: OracleInstance,
    #[serde(default)]
    pub n_max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

impl Health {
    pub fn ok() -> Self {
        Self {
            status: "ok".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Malformed request or input files.
    Invalid,
    /// No query concept could be grounded in the graph.
    NoAnchors,
    /// An embedding or reasoner backend failed.
    Backend,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ApiError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl ToString) -> Self {
        Self::new(ErrorKind::Invalid, message.to_string())
    }
}

impl From<BundleError> for ApiError {
    fn from(e: BundleError) -> Self {
        Self::invalid(e)
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let kind = match &e {
            QueryError::Anchors(AnchorError::NoAnchors) => ErrorKind::NoAnchors,
            QueryError::Embed(_) => ErrorKind::Backend,
            QueryError::Bubble(_) => ErrorKind::Internal,
            _ => ErrorKind::Invalid,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::Suite(_) | EvalError::Variant { .. } | EvalError::Synth { .. } => {
                ErrorKind::Invalid
            }
            EvalError::Reasoner(_) => ErrorKind::Backend,
            _ => ErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

pub fn index(req: &IndexRequest) -> Result<Manifest, ApiError> {
    Ok(bundle::index(
        &req.nodes,
        &req.edges,
        &req.chunks,
        req.dim,
        &req.out,
    )?)
}

pub fn query(bundle: &Bundle, req: &QueryRequest) -> Result<QueryResponse, ApiError> {
    let config = &req.config;
    config.validate().map_err(ApiError::invalid)?;
    if let Some(dim) = config.dim {
        if dim != bundle.manifest.dim {
            return Err(BundleError::Dimension {
                expected: dim,
                found: bundle.manifest.dim,
            }
            .into());
        }
    }
    let provider = build_provider(&config.provider, bundle.graph.dim())
        .map_err(|e| ApiError::new(ErrorKind::Backend, e.to_string()))?;
    let reasoner = build_reasoner(&config.reasoner)
        .map_err(|e| ApiError::new(ErrorKind::Backend, e.to_string()))?;
    let ctx = QueryContext {
        graph: &bundle.graph,
        chunk_vectors: &bundle.chunk_vectors,
        provider: provider.as_ref(),
        reasoner: reasoner.as_ref(),
        config,
    };
    let outcome = run_query(&ctx, &req.query)?;
    Ok(QueryResponse {
        output: render_output(&bundle.graph, &outcome, req.flags),
        answer: outcome.answer,
        gated: outcome.gated,
        degraded: outcome.answer_degraded,
        timings: outcome.timings.stages(),
        total_ms: outcome.timings.total().as_secs_f64() * 1e3,
    })
}

pub fn synth(req: &SynthRequest) -> Result<SynthResponse, ApiError> {
    let inst = synth_kg(&req.spec).map_err(ApiError::invalid)?;
    let manifest = inst.write(&req.out).map_err(ApiError::invalid)?;
    Ok(SynthResponse {
        manifest,
        truth: inst.truth,
    })
}

pub fn eval(req: &EvalRequest) -> Result<EvalReport, ApiError> {
    let report = run_suite(&req.suite)?;
    if let Some(out) = &req.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(out, text + "\n")
            .map_err(|e| ApiError::invalid(format!("{}: {e}", out.display())))?;
    }
    Ok(report)
}

pub fn oracle(req: &OracleRequest) -> Result<OracleReport, ApiError> {
    let n_max = req.n_max.unwrap_or(crate::oracle::DEFAULT_N_MAX);
    solve_instance(&req.instance, n_max).map_err(ApiError::invalid)
}
