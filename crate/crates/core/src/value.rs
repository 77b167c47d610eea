//! Query-conditioned value and cost of graph elements.
//!
//! `val(x)` is the cosine between the query embedding and the element
//! embedding; `cost(x) = 1 - val(x)`. Negative cosines are kept, so costs
//! range over `[0, 2]`.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::graph::{ElementRef, GraphError, KnowledgeGraph};

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
///
/// Panics on length mismatch; use [`try_cosine`] at API boundaries.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(
        a.len(),
        b.len(),
        "cosine of vectors with different dimension"
    );
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0)
}

pub fn try_cosine(a: &[f64], b: &[f64]) -> Result<f64, GraphError> {
    if a.len() != b.len() {
        return Err(GraphError::DimensionMismatch {
            what: "cosine operands".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(cosine(a, b))
}

/// Scales `v` to unit length. Returns `None` for zero or non-finite vectors.
pub fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

impl QueryEmbedding {
    /// Wraps `vector`, normalizing it to unit length.
    pub fn new(source_text: impl Into<String>, vector: Vec<f64>) -> Option<Self> {
        Some(Self {
            vector: normalize(vector)?,
            source_text: source_text.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementValue {
    pub element: ElementRef,
    pub val: f64,
    pub cost: f64,
}

impl ElementValue {
    pub fn from_val(element: ElementRef, val: f64) -> Self {
        Self {
            element,
            val,
            cost: 1.0 - val,
        }
    }
}

/// Anything that assigns a value to graph elements.
pub trait ValueFn {
    fn value(&self, x: ElementRef) -> f64;

    fn cost(&self, x: ElementRef) -> f64 {
        1.0 - self.value(x)
    }
}

impl<T: ValueFn + ?Sized> ValueFn for &T {
    fn value(&self, x: ElementRef) -> f64 {
        (**self).value(x)
    }
}

/// Embedding-backed value function for one query session, memoized.
pub struct ValueModel<'g> {
    graph: &'g KnowledgeGraph,
    query: QueryEmbedding,
    memo: RefCell<HashMap<ElementRef, ElementValue>>,
}

impl<'g> ValueModel<'g> {
    pub fn new(graph: &'g KnowledgeGraph, query: QueryEmbedding) -> Result<Self, GraphError> {
        if query.vector.len() != graph.dim() {
            return Err(GraphError::DimensionMismatch {
                what: "query embedding".into(),
                expected: graph.dim(),
                found: query.vector.len(),
            });
        }
        Ok(Self {
            graph,
            query,
            memo: RefCell::new(HashMap::new()),
        })
    }

    pub fn query(&self) -> &QueryEmbedding {
        &self.query
    }

    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.graph
    }

    pub fn element_cost(&self, x: ElementRef) -> Result<ElementValue, GraphError> {
        if !self.graph.contains(x) {
            return Err(GraphError::UnknownElement(x.to_string()));
        }
        if let Some(v) = self.memo.borrow().get(&x) {
            return Ok(*v);
        }
        let val = cosine(&self.query.vector, self.graph.embedding(x));
        let ev = ElementValue::from_val(x, val);
        self.memo.borrow_mut().insert(x, ev);
        Ok(ev)
    }

    pub fn memo_len(&self) -> usize {
        self.memo.borrow().len()
    }
}

impl ValueFn for ValueModel<'_> {
    fn value(&self, x: ElementRef) -> f64 {
        self.element_cost(x)
            .expect("element of the session graph")
            .val
    }
}

/// Explicit per-element values, for synthetic instances and oracle inputs.
#[derive(Debug, Clone, Default)]
pub struct ValueTable {
    values: HashMap<ElementRef, f64>,
    default: f64,
}

impl ValueTable {
    pub fn new(default: f64) -> Self {
        Self {
            values: HashMap::new(),
            default,
        }
    }

    pub fn set(&mut self, x: ElementRef, val: f64) {
        self.values.insert(x, val);
    }

    pub fn with(mut self, x: ElementRef, val: f64) -> Self {
        self.set(x, val);
        self
    }
}

impl ValueFn for ValueTable {
    fn value(&self, x: ElementRef) -> f64 {
        self.values.get(&x).copied().unwrap_or(self.default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::node;
    use crate::graph::NodeIdx;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[0.6, 0.8], &[0.6, 0.8]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[0.6, 0.8]) - 0.6).abs() < 1e-15);
        assert!(try_cosine(&[1.0], &[1.0, 0.0]).is_err());
        // clamped against rounding above 1
        assert!(cosine(&[1.0 + 1e-12], &[1.0]) <= 1.0);
    }

    fn graph() -> KnowledgeGraph {
        KnowledgeGraph::from_lines(
            vec![
                node("a", &[1.0, 0.0]),
                node("b", &[-1.0, 0.0]),
                node("c", &[0.6, 0.8]),
            ],
            vec![],
            vec![],
            None,
        )
        .unwrap()
    }

    #[test]
    fn element_cost_examples() {
        let g = graph();
        let vm = ValueModel::new(&g, QueryEmbedding::new("q", vec![1.0, 0.0]).unwrap()).unwrap();
        let a = vm.element_cost(ElementRef::Node(NodeIdx(0))).unwrap();
        assert_eq!((a.val, a.cost), (1.0, 0.0));
        let b = vm.element_cost(ElementRef::Node(NodeIdx(1))).unwrap();
        assert_eq!((b.val, b.cost), (-1.0, 2.0));
        let c = vm.element_cost(ElementRef::Node(NodeIdx(2))).unwrap();
        assert!((c.cost - 0.4).abs() < 1e-12);
        assert_eq!(c.cost, 1.0 - c.val);
        assert!(vm.element_cost(ElementRef::Node(NodeIdx(9))).is_err());
    }

    #[test]
    fn memoized_values_are_bit_identical() {
        let g = graph();
        let vm = ValueModel::new(&g, QueryEmbedding::new("q", vec![0.3, 0.7]).unwrap()).unwrap();
        let x = ElementRef::Node(NodeIdx(2));
        let first = vm.element_cost(x).unwrap();
        let second = vm.element_cost(x).unwrap();
        assert_eq!(first.val.to_bits(), second.val.to_bits());
        assert_eq!(vm.memo_len(), 1);
    }

    #[test]
    fn query_dimension_checked() {
        let g = graph();
        let q = QueryEmbedding::new("q", vec![1.0, 0.0, 0.0]).unwrap();
        assert!(ValueModel::new(&g, q).is_err());
    }
}
