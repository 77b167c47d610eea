//! Synthetic evaluation suites: generate planted instances, run the graph
//! pipeline on them, compare against the exact solver, aggregate.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::anchor::ChunkVectors;
use crate::bubble::CegDump;
use crate::config::{ConfigError, RunConfig};
use crate::graph::ElementRef;
use crate::oracle::{exact_oisr, is_feasible, phi, Subgraph};
use crate::pipeline::{run_with_anchors, QueryContext, QueryError, StageTime};
use crate::reasoner::{build_reasoner, ReasonerError};
use crate::synth::{synth_kg, SynthError, SyntheticSpec};
use crate::value::{ValueFn, ValueModel, ValueTable};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("seed {seed}: {source}")]
    Synth { seed: u64, source: SynthError },
    #[error("seed {seed}: {source}")]
    Query { seed: u64, source: QueryError },
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error("variant {name}: {source}")]
    Variant { name: String, source: ConfigError },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("suite: {0}")]
    Suite(String),
}

/// Per-instance overrides of the template's shape.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Shape {
    pub path_length: Option<usize>,
    pub groups: Option<usize>,
    pub noise_nodes: Option<usize>,
    pub answer_hops: Option<usize>,
}

/// A named set of config overrides, keyed like the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub overrides: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub first_seed: u64,
    pub seeds: usize,
    pub template: SyntheticSpec,
    /// Seed `s` uses `shapes[s % len]`; empty means the template as is.
    pub shapes: Vec<Shape>,
    /// Every `split_every`-th seed gets a cut planted path. Zero disables.
    pub split_every: usize,
    pub config: RunConfig,
    pub variants: Vec<Variant>,
    pub workers: usize,
    pub oracle: bool,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            first_seed: 0,
            seeds: 1,
            template: SyntheticSpec::default(),
            shapes: Vec::new(),
            split_every: 0,
            config: RunConfig::default(),
            variants: Vec::new(),
            workers: 1,
            oracle: true,
        }
    }
}

impl SuiteSpec {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let suite: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| EvalError::Suite(format!("{}: {}", e.path(), e.inner())))?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.workers == 0 {
            return Err(EvalError::Suite("workers must be at least 1".into()));
        }
        self.config
            .validate()
            .map_err(|e| EvalError::Suite(e.to_string()))?;
        for v in &self.variants {
            apply_overrides(&self.config, &v.overrides).map_err(|source| EvalError::Variant {
                name: v.name.clone(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64)
            .map(|i| self.first_seed + i)
            .collect()
    }

    /// The synthetic spec for one seed.
    pub fn instance_spec(&self, seed: u64) -> SyntheticSpec {
        let mut spec = self.template.clone();
        spec.seed = seed;
        if !self.shapes.is_empty() {
            let shape = &self.shapes[(seed % self.shapes.len() as u64) as usize];
            if let Some(x) = shape.path_length {
                spec.path_length = x;
            }
            if let Some(x) = shape.groups {
                spec.groups = x;
            }
            if let Some(x) = shape.noise_nodes {
                spec.noise_nodes = x;
            }
            if let Some(x) = shape.answer_hops {
                spec.answer_hops = x;
            }
        }
        let offset = seed - self.first_seed;
        if self.split_every > 0 && offset % self.split_every as u64 == self.split_every as u64 - 1 {
            spec.split = true;
        }
        spec
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "budget" => "B",
        "hops" => "h",
        "depth" => "d",
        "dim" => "D",
        other => other,
    }
}

/// Overlays `overrides` onto `base`, accepting long or short field names.
pub fn apply_overrides(
    base: &RunConfig,
    overrides: &Map<String, Value>,
) -> Result<RunConfig, ConfigError> {
    let Value::Object(mut merged) = serde_json::to_value(base).expect("config serializes") else {
        unreachable!("config is an object");
    };
    for (k, v) in overrides {
        merged.insert(canonical_key(k).to_string(), v.clone());
    }
    RunConfig::from_json(&Value::Object(merged).to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub seed: u64,
    pub path_length: usize,
    pub groups: usize,
    pub noise_nodes: usize,
    pub answer_hops: usize,
    pub split: bool,
    pub elements: usize,
    /// Top-ranked CEG is connected and touches every group.
    pub feasible: bool,
    pub fallback: bool,
    /// Top-ranked CEG is exactly the planted path.
    pub planted_exact: bool,
    /// Every planted element, and the answer node if any, reached the merged
    /// evidence graph.
    pub planted_recall: bool,
    pub answer_reached: Option<bool>,
    pub phi_heuristic: Option<f64>,
    pub phi_opt: Option<f64>,
    pub density_ratio: Option<f64>,
    pub oracle_matches_planted: Option<bool>,
    pub note: Option<String>,
    pub answer: String,
    pub top_ceg: Option<CegDump>,
    pub latency: Vec<StageTime>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(values: impl IntoIterator<Item = f64>) -> Option<Summary> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(Summary {
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        min: v[0],
        max: v[v.len() - 1],
        p50: percentile(&v, 50.0),
        p90: percentile(&v, 90.0),
        p99: percentile(&v, 99.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub instances: usize,
    pub feasible_rate: f64,
    pub fallback_rate: f64,
    pub planted_exact_rate: f64,
    pub planted_recall_rate: f64,
    pub answer_reached_rate: Option<f64>,
    pub oracle_runs: usize,
    pub oracle_matches_planted_rate: Option<f64>,
    pub density_ratio: Option<Summary>,
    pub total_ms: Option<Summary>,
    pub stage_mean_ms: BTreeMap<String, f64>,
}

fn rate(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (hit, n) = flags.fold((0usize, 0usize), |(h, n), f| (h + f as usize, n + 1));
    (n > 0).then(|| hit as f64 / n as f64)
}

pub fn aggregate(records: &[InstanceRecord]) -> Aggregates {
    let mut stage_sum: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        for s in &r.latency {
            *stage_sum.entry(s.stage.clone()).or_default() += s.ms;
        }
    }
    let n = records.len().max(1) as f64;
    Aggregates {
        instances: records.len(),
        feasible_rate: rate(records.iter().map(|r| r.feasible)).unwrap_or(0.0),
        fallback_rate: rate(records.iter().map(|r| r.fallback)).unwrap_or(0.0),
        planted_exact_rate: rate(records.iter().map(|r| r.planted_exact)).unwrap_or(0.0),
        planted_recall_rate: rate(records.iter().map(|r| r.planted_recall)).unwrap_or(0.0),
        answer_reached_rate: rate(records.iter().filter_map(|r| r.answer_reached)),
        oracle_runs: records.iter().filter(|r| r.phi_opt.is_some()).count(),
        oracle_matches_planted_rate: rate(records.iter().filter_map(|r| r.oracle_matches_planted)),
        density_ratio: summarize(records.iter().filter_map(|r| r.density_ratio)),
        total_ms: summarize(records.iter().map(|r| r.total_ms)),
        stage_mean_ms: stage_sum.into_iter().map(|(k, v)| (k, v / n)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub config: RunConfig,
    pub aggregates: Aggregates,
    pub records: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: SuiteSpec,
    pub config: RunConfig,
    pub aggregates: Aggregates,
    pub records: Vec<InstanceRecord>,
    pub variants: Vec<VariantReport>,
}

/// Runs one seeded instance through the graph half of the pipeline, using
/// the planted anchor groups directly.
pub fn run_instance(
    suite: &SuiteSpec,
    config: &RunConfig,
    seed: u64,
) -> Result<InstanceRecord, EvalError> {
    let spec = suite.instance_spec(seed);
    let inst = synth_kg(&spec).map_err(|source| EvalError::Synth { seed, source })?;
    let graph = &inst.graph;
    let provider = inst.provider();
    let chunk_vectors = ChunkVectors::new(graph);
    let reasoner = build_reasoner(&config.reasoner)?;
    let anchors = inst.anchor_groups();
    let query = inst.query_embedding();
    let ctx = QueryContext {
        graph,
        chunk_vectors: &chunk_vectors,
        provider: &provider,
        reasoner: reasoner.as_ref(),
        config,
    };
    let started = Instant::now();
    let outcome = run_with_anchors(&ctx, query.clone(), anchors.clone())
        .map_err(|source| EvalError::Query { seed, source })?;
    let total_ms = started.elapsed().as_secs_f64() * 1e3;

    let value = ValueModel::new(graph, query).expect("dimension checked by pipeline");
    let (planted_nodes, planted_edges) = inst.planted_elements();
    let top = outcome.ranked.first().map(|s| &s.ceg);
    let top_sub = top.map(Subgraph::from);
    let feasible = top_sub
        .as_ref()
        .is_some_and(|s| is_feasible(graph, s, &anchors));
    let dump = top.map(|c| c.dump(graph));
    let planted_exact = dump.as_ref().is_some_and(|d| {
        d.nodes.iter().cloned().collect::<BTreeSet<_>>() == planted_nodes
            && d.edges.iter().cloned().collect::<BTreeSet<_>>() == planted_edges
    });

    let in_merged = |id: &str, node: bool| -> bool {
        let x = if node {
            graph.node_by_id(id).map(ElementRef::Node)
        } else {
            graph.edge_by_id(id).map(ElementRef::Edge)
        };
        x.is_some_and(|x| outcome.merged.contains(x))
    };
    let answer_reached = inst
        .truth
        .answer_node
        .as_deref()
        .map(|id| in_merged(id, true));
    let planted_recall = planted_nodes.iter().all(|id| in_merged(id, true))
        && planted_edges.iter().all(|id| in_merged(id, false))
        && answer_reached.unwrap_or(true);

    let phi_heuristic = match (&top_sub, feasible) {
        (Some(s), true) => phi(graph, s, &value).ok(),
        _ => None,
    };

    let mut note = None;
    let mut phi_opt = None;
    let mut oracle_matches_planted = None;
    let elements = graph.node_count() + graph.edge_count();
    if suite.oracle {
        if elements > config.n_max {
            note = Some(format!(
                "oracle skipped: {elements} elements exceed n_max {}",
                config.n_max
            ));
        } else {
            let table = graph
                .elements()
                .fold(ValueTable::new(0.0), |t, x| t.with(x, value.value(x)));
            match exact_oisr(graph, &anchors, &table, config.n_max) {
                Ok(sol) if sol.feasible => {
                    let names = |s: &Subgraph| -> (BTreeSet<String>, BTreeSet<String>) {
                        (
                            s.nodes.iter().map(|&v| graph.node(v).id.clone()).collect(),
                            s.edges.iter().map(|&e| graph.edge(e).id.clone()).collect(),
                        )
                    };
                    oracle_matches_planted = Some(
                        !spec.split
                            && spec.answer_hops == 0
                            && names(&sol.subgraph)
                                == (planted_nodes.clone(), planted_edges.clone()),
                    );
                    phi_opt = Some(sol.phi);
                }
                Ok(_) => note = Some("oracle: no feasible subgraph".into()),
                Err(e) => note = Some(format!("oracle: {e}")),
            }
        }
    }
    let density_ratio = match (phi_heuristic, phi_opt) {
        (Some(h), Some(o)) if o > 0.0 => Some(h / o),
        _ => None,
    };

    Ok(InstanceRecord {
        seed,
        path_length: spec.path_length,
        groups: spec.groups,
        noise_nodes: spec.noise_nodes,
        answer_hops: spec.answer_hops,
        split: spec.split,
        elements,
        feasible,
        fallback: outcome.stats.used_fallback,
        planted_exact,
        planted_recall,
        answer_reached,
        phi_heuristic,
        phi_opt,
        density_ratio,
        oracle_matches_planted,
        note,
        answer: outcome.answer,
        top_ceg: dump,
        latency: outcome.timings.stages(),
        total_ms,
    })
}

/// Runs every seed under `config` on the suite's worker pool. Records come
/// back in seed order.
pub fn run_records(
    suite: &SuiteSpec,
    config: &RunConfig,
) -> Result<Vec<InstanceRecord>, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(suite.workers)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let seeds = suite.seed_list();
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| run_instance(suite, config, s))
            .collect()
    })
}

pub fn run_suite(suite: &SuiteSpec) -> Result<EvalReport, EvalError> {
    suite.validate()?;
    let records = run_records(suite, &suite.config)?;
    let mut variants = Vec::new();
    for v in &suite.variants {
        let config =
            apply_overrides(&suite.config, &v.overrides).map_err(|source| EvalError::Variant {
                name: v.name.clone(),
                source,
            })?;
        let records = run_records(suite, &config)?;
        variants.push(VariantReport {
            name: v.name.clone(),
            aggregates: aggregate(&records),
            config,
            records,
        });
    }
    tracing::info!(
        seeds = suite.seeds,
        variants = variants.len(),
        "eval finished"
    );
    Ok(EvalReport {
        suite: suite.clone(),
        config: suite.config.clone(),
        aggregates: aggregate(&records),
        records,
        variants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let s = summarize((1..=10).map(f64::from)).unwrap();
        assert_eq!(
            (s.p50, s.p90, s.p99, s.min, s.max),
            (5.0, 9.0, 10.0, 1.0, 10.0)
        );
        assert_eq!(s.mean, 5.5);
        assert!(summarize(std::iter::empty()).is_none());
    }

    #[test]
    fn overrides_accept_both_names() {
        let base = RunConfig::default();
        let mut o = Map::new();
        o.insert("depth".into(), 2.into());
        o.insert("alpha".into(), 5.0.into());
        let c = apply_overrides(&base, &o).unwrap();
        assert_eq!((c.depth, c.alpha, c.budget), (2, 5.0, 10));
        o.insert("bogus".into(), 1.into());
        assert!(apply_overrides(&base, &o).is_err());
    }

    #[test]
    fn shapes_and_splits_by_seed() {
        let suite = SuiteSpec {
            seeds: 4,
            shapes: vec![
                Shape::default(),
                Shape {
                    groups: Some(3),
                    ..Shape::default()
                },
            ],
            split_every: 2,
            ..SuiteSpec::default()
        };
        let specs: Vec<_> = suite
            .seed_list()
            .into_iter()
            .map(|s| suite.instance_spec(s))
            .collect();
        assert_eq!(
            specs.iter().map(|s| s.groups).collect::<Vec<_>>(),
            [2, 3, 2, 3]
        );
        assert_eq!(
            specs.iter().map(|s| s.split).collect::<Vec<_>>(),
            [false, true, false, true]
        );
    }

    #[test]
    fn trivial_suite_is_feasible() {
        let suite = SuiteSpec {
            template: SyntheticSpec {
                path_length: 2,
                noise_nodes: 0,
                ..SyntheticSpec::default()
            },
            ..SuiteSpec::default()
        };
        let report = run_suite(&suite).unwrap();
        assert_eq!(report.records.len(), 1);
        let r = &report.records[0];
        assert!(r.feasible && r.planted_exact && r.planted_recall);
        assert_eq!(r.oracle_matches_planted, Some(true));
        assert!((r.density_ratio.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_instance_falls_back() {
        let suite = SuiteSpec {
            split_every: 1,
            ..SuiteSpec::default()
        };
        let r = &run_suite(&suite).unwrap().records[0];
        assert!(r.split && r.fallback && !r.feasible);
        assert!(r.density_ratio.is_none());
        assert_eq!(r.note.as_deref(), Some("oracle: no feasible subgraph"));
    }

    #[test]
    fn oversized_instances_note_the_skip() {
        let suite = SuiteSpec {
            template: SyntheticSpec {
                noise_nodes: 20,
                ..SyntheticSpec::default()
            },
            ..SuiteSpec::default()
        };
        let r = &run_suite(&suite).unwrap().records[0];
        assert!(r.phi_opt.is_none());
        assert!(r.note.as_deref().unwrap().starts_with("oracle skipped"));
    }
}
