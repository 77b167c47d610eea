use std::collections::{BTreeSet, VecDeque};

use bubblerag_core::anchor::AnchorGroupSet;
use bubblerag_core::bubble::{bubble_expand, localize};
use bubblerag_core::graph::{EdgeIdx, EdgeLine, ElementRef, KnowledgeGraph, NodeIdx, NodeLine};
use bubblerag_core::rank::{rank, RankParams};
use bubblerag_core::synth::{synth_kg, SyntheticSpec};
use bubblerag_core::value::{QueryEmbedding, ValueTable};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    n: usize,
    ends: Vec<(usize, usize)>,
    vals: Vec<f64>,
    groups: Vec<Vec<usize>>,
}

fn case() -> impl Strategy<Value = Case> {
    (3usize..20).prop_flat_map(|n| {
        let tree = (1..n)
            .map(|v| (0..v).prop_map(move |u| (u, v)))
            .collect::<Vec<_>>();
        let extra = prop::collection::vec((0..n, 0..n), 0..n);
        let vals = prop::collection::vec(0.0f64..1.0, n);
        let groups = prop::collection::vec(prop::collection::vec(0..n, 1..3), 2..5);
        (tree, extra, vals, groups).prop_map(move |(tree, extra, vals, groups)| {
            let mut ends = tree;
            for (a, b) in extra {
                let key = (a.min(b), a.max(b));
                if a != b && !ends.iter().any(|&(x, y)| (x.min(y), x.max(y)) == key) {
                    ends.push((a, b));
                }
            }
            Case {
                n,
                ends,
                vals,
                groups,
            }
        })
    })
}

fn build(c: &Case) -> (KnowledgeGraph, AnchorGroupSet, ValueTable) {
    let id = |i: usize| format!("n{i:02}");
    let nodes = (0..c.n)
        .map(|i| NodeLine {
            id: id(i),
            label: id(i),
            description: String::new(),
            embedding: vec![1.0],
            chunks: vec![],
        })
        .collect();
    let edges = c
        .ends
        .iter()
        .enumerate()
        .map(|(j, &(a, b))| EdgeLine {
            id: format!("e{j:02}"),
            src: id(a),
            dst: id(b),
            relation: "r".into(),
            text: String::new(),
            embedding: vec![1.0],
            chunks: vec![],
        })
        .collect();
    let graph = KnowledgeGraph::from_lines(nodes, edges, vec![], None).unwrap();
    let mut values = ValueTable::new(0.5);
    for (i, &v) in c.vals.iter().enumerate() {
        values.set(ElementRef::Node(NodeIdx(i as u32)), v);
    }
    let drafts = c
        .groups
        .iter()
        .enumerate()
        .map(|(g, m)| {
            let set = m
                .iter()
                .map(|&i| ElementRef::Node(NodeIdx(i as u32)))
                .collect::<BTreeSet<_>>();
            (format!("g{g}"), set, (g + 1) as f64)
        })
        .collect();
    let q = QueryEmbedding::new("q", vec![1.0]).unwrap();
    (
        graph,
        AnchorGroupSet::from_weighted(q, drafts).unwrap(),
        values,
    )
}

fn connected(c: &Case, nodes: &BTreeSet<NodeIdx>, edges: &BTreeSet<EdgeIdx>) -> bool {
    let ends = |e: &EdgeIdx| c.ends[e.0 as usize];
    if edges
        .iter()
        .map(ends)
        .any(|(a, b)| !nodes.contains(&NodeIdx(a as u32)) || !nodes.contains(&NodeIdx(b as u32)))
    {
        return false;
    }
    let Some(&start) = nodes.iter().next() else {
        return false;
    };
    let mut seen = BTreeSet::from([start.0 as usize]);
    let mut queue = VecDeque::from([start.0 as usize]);
    while let Some(v) = queue.pop_front() {
        for (a, b) in edges.iter().map(ends) {
            let next = if a == v {
                b
            } else if b == v {
                a
            } else {
                continue;
            };
            if seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    seen.len() == nodes.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn candidates_are_connected_and_cover_what_they_claim(c in case(), budget in 1usize..20) {
        let (graph, anchors, values) = build(&c);
        let local = localize(&graph, &anchors, c.n);
        let cegs = bubble_expand(&local, &anchors, &values, budget).unwrap();
        prop_assert!(!cegs.is_empty());
        for ceg in &cegs {
            prop_assert!(connected(&c, &ceg.nodes, &ceg.edges));
            let touched: BTreeSet<usize> = c.groups.iter().enumerate()
                .filter(|(_, m)| m.iter().any(|&i| ceg.nodes.contains(&NodeIdx(i as u32))))
                .map(|(g, _)| g)
                .collect();
            prop_assert!(ceg.covered_groups.is_subset(&touched));
        }
        prop_assert!(cegs.iter().filter(|x| !x.is_fallback).count() <= budget);
    }

    #[test]
    fn ranking_is_sorted_and_truncated(c in case(), top_n in 1usize..6, alpha in 0.0f64..10.0) {
        let (graph, anchors, values) = build(&c);
        let local = localize(&graph, &anchors, c.n);
        let cegs = bubble_expand(&local, &anchors, &values, 20).unwrap();
        let params = RankParams { alpha, top_n, ..RankParams::default() };
        let ranked = rank(&cegs, &anchors, &values, &params).unwrap();
        prop_assert_eq!(ranked.len(), top_n.min(cegs.len()));
        for w in ranked.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for s in &ranked {
            prop_assert!((0.0..=1.0).contains(&s.r_miss));
            prop_assert!(s.penalty >= 1.0);
        }
    }

    #[test]
    fn synthesis_is_a_function_of_the_spec(seed in 0u64..10_000, groups in 2usize..4, noise in 0usize..12) {
        let spec = SyntheticSpec { seed, groups, noise_nodes: noise, ..SyntheticSpec::default() };
        let a = synth_kg(&spec).unwrap();
        let b = synth_kg(&spec).unwrap();
        prop_assert_eq!(&a.truth, &b.truth);
        prop_assert_eq!(a.embedding_pairs(), b.embedding_pairs());
        prop_assert_eq!(a.graph.node_count(), spec.path_length + 1 + noise);
    }
}
