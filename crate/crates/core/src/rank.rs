//! Scoring and selection of candidate evidence graphs.
//!
//! A candidate is penalized for semantic dissonance (mean node cost) and,
//! exponentially in `alpha`, for the anchor weight it fails to cover.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorGroupSet;
use crate::bubble::{CandidateEvidenceGraph, CegDump};
use crate::graph::{ElementRef, KnowledgeGraph};
use crate::value::ValueFn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankParams {
    pub alpha: f64,
    pub epsilon: f64,
    pub top_n: usize,
    pub intra_group_penalty: f64,
    /// Average edge costs into `cost_sem` as well as node costs.
    pub include_edges: bool,
}

impl Default for RankParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 1e-9,
            top_n: 3,
            intra_group_penalty: 1.5,
            include_edges: false,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RankError {
    #[error("candidate has no nodes")]
    EmptyCeg,
    #[error("nothing to rank")]
    NoCandidates,
    #[error("invalid rank parameter: {0}")]
    BadParams(&'static str),
}

impl RankParams {
    pub fn validate(&self) -> Result<(), RankError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(RankError::BadParams("alpha must be finite and >= 0"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(RankError::BadParams("epsilon must be > 0"));
        }
        if self.top_n == 0 {
            return Err(RankError::BadParams("top_n must be >= 1"));
        }
        if self.intra_group_penalty.is_nan() || self.intra_group_penalty < 1.0 {
            return Err(RankError::BadParams("intra_group_penalty must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCeg {
    pub ceg: CandidateEvidenceGraph,
    pub cost_sem: f64,
    pub r_miss: f64,
    pub penalty: f64,
    pub score: f64,
}

/// `--explain` form of a scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDump {
    #[serde(flatten)]
    pub ceg: CegDump,
    pub cost_sem: f64,
    pub r_miss: f64,
    pub penalty: f64,
    pub score: f64,
}

impl ScoredCeg {
    pub fn dump(&self, graph: &KnowledgeGraph) -> ScoredDump {
        ScoredDump {
            ceg: self.ceg.dump(graph),
            cost_sem: self.cost_sem,
            r_miss: self.r_miss,
            penalty: self.penalty,
            score: self.score,
        }
    }
}

/// Mean node cost.
pub fn cost_sem<V: ValueFn + ?Sized>(
    ceg: &CandidateEvidenceGraph,
    value: &V,
) -> Result<f64, RankError> {
    cost_sem_with(ceg, value, false)
}

pub fn cost_sem_with<V: ValueFn + ?Sized>(
    ceg: &CandidateEvidenceGraph,
    value: &V,
    include_edges: bool,
) -> Result<f64, RankError> {
    if ceg.nodes.is_empty() {
        return Err(RankError::EmptyCeg);
    }
    let mut total: f64 = ceg
        .nodes
        .iter()
        .map(|&v| value.cost(ElementRef::Node(v)))
        .sum();
    let mut count = ceg.nodes.len();
    if include_edges {
        total += ceg
            .edges
            .iter()
            .map(|&e| value.cost(ElementRef::Edge(e)))
            .sum::<f64>();
        count += ceg.edges.len();
    }
    Ok(total / count as f64)
}

/// Total weight of the groups the candidate does not touch.
pub fn missing_mass(ceg: &CandidateEvidenceGraph, anchors: &AnchorGroupSet) -> f64 {
    let covered = anchors.coverage(ceg.elements().collect::<Vec<_>>().iter());
    anchors
        .groups()
        .iter()
        .filter(|g| covered >> g.id & 1 == 0)
        .fold(0.0, |acc, g| acc + g.weight)
        .clamp(0.0, 1.0)
}

pub fn penalty_miss(r_miss: f64, alpha: f64) -> f64 {
    (alpha * r_miss).exp()
}

pub fn score<V: ValueFn + ?Sized>(
    ceg: &CandidateEvidenceGraph,
    anchors: &AnchorGroupSet,
    value: &V,
    params: &RankParams,
) -> Result<ScoredCeg, RankError> {
    let cost_sem = cost_sem_with(ceg, value, params.include_edges)?;
    let r_miss = missing_mass(ceg, anchors);
    let penalty = penalty_miss(r_miss, params.alpha);
    let mut score = 1.0 / (cost_sem * penalty + params.epsilon);
    if ceg.intra_group_only {
        score /= params.intra_group_penalty;
    }
    Ok(ScoredCeg {
        ceg: ceg.clone(),
        cost_sem,
        r_miss,
        penalty,
        score,
    })
}

fn order(a: &ScoredCeg, b: &ScoredCeg) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.r_miss.total_cmp(&b.r_miss))
        .then_with(|| a.ceg.nodes.len().cmp(&b.ceg.nodes.len()))
        .then_with(|| a.ceg.nodes.iter().cmp(b.ceg.nodes.iter()))
}

/// Scores every candidate and keeps the best `top_n`.
///
/// Ties go to lower missing mass, then fewer nodes, then the smaller node
/// sequence (node indices follow id order).
pub fn rank<V: ValueFn + ?Sized>(
    cegs: &[CandidateEvidenceGraph],
    anchors: &AnchorGroupSet,
    value: &V,
    params: &RankParams,
) -> Result<Vec<ScoredCeg>, RankError> {
    params.validate()?;
    if cegs.is_empty() {
        return Err(RankError::NoCandidates);
    }
    let mut scored = cegs
        .iter()
        .map(|c| score(c, anchors, value, params))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(order);
    scored.truncate(params.top_n);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeIdx, NodeIdx};
    use crate::value::{QueryEmbedding, ValueTable};
    use std::collections::BTreeSet;

    fn anchors(weights: &[f64]) -> AnchorGroupSet {
        let q = QueryEmbedding::new("q", vec![1.0]).unwrap();
        let drafts = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                (
                    format!("g{i}"),
                    BTreeSet::from([ElementRef::Node(NodeIdx(i as u32))]),
                    w,
                )
            })
            .collect();
        AnchorGroupSet::from_weighted(q, drafts).unwrap()
    }

    fn ceg(nodes: &[u32], anchors: &AnchorGroupSet) -> CandidateEvidenceGraph {
        let covered: BTreeSet<usize> = nodes
            .iter()
            .filter(|&&v| (v as usize) < anchors.len())
            .map(|&v| v as usize)
            .collect();
        CandidateEvidenceGraph {
            nodes: nodes.iter().map(|&v| NodeIdx(v)).collect(),
            edges: BTreeSet::<EdgeIdx>::new(),
            steiner_node: None,
            intra_group_only: covered.len() < 2,
            covered_groups: covered,
            is_fallback: false,
            discovery_cost: 0.0,
        }
    }

    fn costs(c: &[(u32, f64)]) -> ValueTable {
        c.iter().fold(ValueTable::new(0.0), |t, &(v, cost)| {
            t.with(ElementRef::Node(NodeIdx(v)), 1.0 - cost)
        })
    }

    #[test]
    fn cost_sem_mean() {
        let a = anchors(&[1.0]);
        let vals = costs(&[(0, 0.2), (1, 0.4), (2, 0.6)]);
        let c = cost_sem(&ceg(&[0, 1, 2], &a), &vals).unwrap();
        assert!((c - 0.4).abs() < 1e-15);
        assert_eq!(cost_sem(&ceg(&[], &a), &vals), Err(RankError::EmptyCeg));
    }

    #[test]
    fn missing_mass_examples() {
        let a = anchors(&[0.8, 0.2]);
        assert_eq!(missing_mass(&ceg(&[0, 1], &a), &a), 0.0);
        assert!((missing_mass(&ceg(&[0], &a), &a) - 0.2).abs() < 1e-15);
        assert_eq!(missing_mass(&ceg(&[5], &a), &a), 1.0);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_miss(0.0, 3.0), 1.0);
        assert_eq!(penalty_miss(0.7, 0.0), 1.0);
    }

    #[test]
    fn score_and_intra_divisor() {
        let a = anchors(&[0.5, 0.5]);
        let vals = costs(&[(0, 0.5), (1, 0.5)]);
        let full = score(&ceg(&[0, 1], &a), &a, &vals, &RankParams::default()).unwrap();
        assert_eq!(full.score, 1.0 / (0.5 + 1e-9));
        let mut intra = ceg(&[0, 1], &a);
        intra.intra_group_only = true;
        let p = RankParams {
            intra_group_penalty: 2.0,
            ..RankParams::default()
        };
        let s = score(&intra, &a, &vals, &p).unwrap();
        assert_eq!(s.score, full.score / 2.0);
    }

    #[test]
    fn alpha_switches_semantics() {
        let a = anchors(&[0.5, 0.5]);
        let vals = costs(&[(0, 0.1), (1, 0.9), (3, 0.5)]);
        // complete mean cost 0.5; partial mean 0.3 but misses group 1
        let complete = ceg(&[0, 1], &a);
        let partial = ceg(&[0, 3], &a);
        let strict = RankParams {
            alpha: 10.0,
            ..RankParams::default()
        };
        let r = rank(&[partial.clone(), complete.clone()], &a, &vals, &strict).unwrap();
        assert_eq!(r[0].ceg, complete);
        let loose = RankParams {
            alpha: 0.0,
            ..RankParams::default()
        };
        let r = rank(&[complete, partial.clone()], &a, &vals, &loose).unwrap();
        assert_eq!(r[0].ceg, partial);
    }

    #[test]
    fn single_candidate_always_returned() {
        let a = anchors(&[1.0]);
        let r = rank(
            &[ceg(&[3], &a)],
            &a,
            &ValueTable::new(-1.0),
            &RankParams::default(),
        )
        .unwrap();
        assert_eq!(r.len(), 1);
    }
}
