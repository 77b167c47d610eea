use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use bubblerag_core::anchor::{AnchorError, ChunkVectors};
use bubblerag_core::bundle::Bundle;
use bubblerag_core::config::RunConfig;
use bubblerag_core::embedding::build_provider;
use bubblerag_core::pipeline::{
    explain_json, render_output, run_query, OutputFlags, QueryContext, QueryError, QueryOutcome,
};
use bubblerag_core::reasoner::{build_reasoner, MockReasoner, RequestKind};
use bubblerag_core::synth::{synth_kg, SyntheticSpec};
use serde_json::{json, Value};

const QUERY: &str = "When did Lothair II's mother die?";

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/lothair")
}

fn run_bundle(dir: &Path) -> (Bundle, QueryOutcome) {
    let config = RunConfig::load(&dir.join("config.json")).unwrap();
    let bundle = Bundle::open(dir, config.dim).unwrap();
    let provider = build_provider(&config.provider, bundle.graph.dim()).unwrap();
    let reasoner = build_reasoner(&config.reasoner).unwrap();
    let ctx = QueryContext {
        graph: &bundle.graph,
        chunk_vectors: &bundle.chunk_vectors,
        provider: provider.as_ref(),
        reasoner: reasoner.as_ref(),
        config: &config,
    };
    let out = run_query(&ctx, QUERY).unwrap();
    (bundle, out)
}

#[test]
fn lothair_walkthrough() {
    let (bundle, out) = run_bundle(&fixture());
    assert_eq!(out.answer, "860 AD");
    assert!(!out.gated && !out.answer_degraded);
    let anchors = out.anchors.as_ref().unwrap();
    assert_eq!(anchors.len(), 3);
    let weights: Vec<f64> = anchors.groups().iter().map(|g| g.weight).collect();
    assert_eq!(weights, [0.5, 0.3, 0.2]);

    let g = &bundle.graph;
    let top = &out.ranked[0].ceg;
    let ids: Vec<&str> = top.nodes.iter().map(|&v| g.node(v).id.as_str()).collect();
    assert_eq!(ids, ["ad_860", "gisela", "lothair_ii"]);
    assert_eq!(top.covered_groups.len(), 3);
    assert_eq!(out.ranked[0].r_miss, 0.0);

    let triples: Vec<String> = out
        .context
        .triples
        .iter()
        .map(|t| serde_json::to_string(t).unwrap())
        .collect();
    assert!(triples.iter().any(|t| t.contains("died_in")));

    let explain = explain_json(g, &out);
    assert_eq!(explain["gated"], json!(false));
    assert_eq!(explain["anchors"].as_array().unwrap().len(), 3);
    assert!(explain["ranked"][0]["score"].as_f64().unwrap() > 0.0);
}

#[test]
fn timings_cover_every_stage() {
    let (_, out) = run_bundle(&fixture());
    let stages = out.timings.stages();
    let names: Vec<&str> = stages.iter().map(|s| s.stage.as_str()).collect();
    for want in [
        "embed_query",
        "group",
        "bubble_expand",
        "rank",
        "reasoning_expand",
        "generate",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    let sum: f64 = stages.iter().map(|s| s.ms).sum();
    let total = out.timings.total().as_secs_f64() * 1e3;
    assert!(
        (sum - total).abs() < 1e-6 * total.max(1.0),
        "{sum} vs {total}"
    );
}

#[test]
fn rendered_sections_parse() {
    let (bundle, out) = run_bundle(&fixture());
    let flags = OutputFlags {
        dump_cegs: true,
        explain: true,
        emit_context: true,
    };
    let text = render_output(&bundle.graph, &out, flags);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "860 AD");
    let headers: Vec<&str> = lines
        .iter()
        .copied()
        .filter(|l| l.starts_with("# "))
        .collect();
    assert_eq!(headers, ["# cegs", "# explain", "# context"]);
    for (i, l) in lines.iter().enumerate() {
        if l.starts_with("# ") {
            serde_json::from_str::<Value>(lines[i + 1]).unwrap();
        }
    }
    let plain = render_output(&bundle.graph, &out, OutputFlags::default());
    assert_eq!(plain, "860 AD\n");
}

#[test]
fn sufficient_pre_retrieval_skips_the_graph() {
    let tmp = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixture()).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, tmp.path().join(p.file_name().unwrap())).unwrap();
    }
    let line = json!({
        "kind": "SufficiencyCheck",
        "query": QUERY,
        "response": {"sufficient": true, "answer": "Gisela died in 860."}
    });
    let path = tmp.path().join("fixtures.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str(&format!("{line}\n"));
    fs::write(&path, text).unwrap();

    let (_, out) = run_bundle(tmp.path());
    assert!(out.gated);
    assert_eq!(out.answer, "Gisela died in 860.");
    assert!(out.anchors.is_none() && out.cegs.is_empty() && out.ranked.is_empty());
    assert_eq!(out.context.chunks, out.pre_retrieved);
    assert!(!out.pre_retrieved.is_empty());
}

#[test]
fn unembeddable_keywords_report_no_anchors() {
    let inst = synth_kg(&SyntheticSpec::default()).unwrap();
    let query = inst.truth.query.clone();
    let reasoner = MockReasoner::new().with_fixture(
        RequestKind::KeywordExtract,
        &query,
        json!({"keywords": [{"text": "Atlantis"}]}),
    );
    let provider = inst.provider();
    let cv = ChunkVectors::new(&inst.graph);
    let config = RunConfig::default();
    let ctx = QueryContext {
        graph: &inst.graph,
        chunk_vectors: &cv,
        provider: &provider,
        reasoner: &reasoner,
        config: &config,
    };
    let err = run_query(&ctx, &query).unwrap_err();
    assert!(
        matches!(err, QueryError::Anchors(AnchorError::NoAnchors)),
        "{err}"
    );
}

#[test]
fn synthetic_query_end_to_end() {
    let inst = synth_kg(&SyntheticSpec {
        seed: 3,
        groups: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let reasoner = MockReasoner::new();
    let provider = inst.provider();
    let cv = ChunkVectors::new(&inst.graph);
    let config = RunConfig::default();
    let ctx = QueryContext {
        graph: &inst.graph,
        chunk_vectors: &cv,
        provider: &provider,
        reasoner: &reasoner,
        config: &config,
    };
    let out = run_query(&ctx, &inst.truth.query).unwrap();
    let top = &out.ranked[0].ceg;
    let g = &inst.graph;
    let nodes = top.nodes.iter().map(|&v| g.node(v).id.clone()).collect();
    let edges = top.edges.iter().map(|&e| g.edge(e).id.clone()).collect();
    let (nodes, edges): (BTreeSet<String>, BTreeSet<String>) = (nodes, edges);
    let (pn, pe) = inst.planted_elements();
    // grounding may add near neighbours, but the planted path stays whole
    assert!(
        pn.is_subset(&nodes) && pe.is_subset(&edges),
        "{nodes:?} {edges:?}"
    );
}
