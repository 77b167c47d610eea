use std::fs;
use std::path::{Path, PathBuf};

use bubblerag_core::bundle::{self, Bundle, BundleError, MANIFEST_FILE};
use bubblerag_core::graph::GraphError;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/lothair")
}

fn index_into(src: &Path, out: &Path) -> Result<bundle::Manifest, BundleError> {
    bundle::index(
        &src.join("nodes.jsonl"),
        &src.join("edges.jsonl"),
        &src.join("chunks.jsonl"),
        None,
        out,
    )
}

#[test]
fn reindexing_is_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = index_into(&fixture(), &tmp.path().join("a")).unwrap();
    let b = index_into(&tmp.path().join("a"), &tmp.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.nodes, a.edges, a.chunks, a.dim), (9, 7, 5, 8));
    for name in ["nodes.jsonl", "edges.jsonl", "chunks.jsonl", MANIFEST_FILE] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(name)).unwrap(),
            fs::read(tmp.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    // the committed fixture is itself canonical
    assert_eq!(a, bundle::read_manifest(&fixture()).unwrap());
}

#[test]
fn input_order_does_not_matter() {
    let tmp = tempfile::tempdir().unwrap();
    let shuffled = tmp.path().join("in");
    fs::create_dir(&shuffled).unwrap();
    for name in ["nodes.jsonl", "edges.jsonl", "chunks.jsonl"] {
        let text = fs::read_to_string(fixture().join(name)).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.reverse();
        fs::write(shuffled.join(name), lines.join("\n") + "\n").unwrap();
    }
    let m = index_into(&shuffled, &tmp.path().join("out")).unwrap();
    assert_eq!(
        m.checksum,
        bundle::read_manifest(&fixture()).unwrap().checksum
    );
}

#[test]
fn dangling_edge_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("in");
    fs::create_dir(&src).unwrap();
    for name in ["nodes.jsonl", "chunks.jsonl"] {
        fs::copy(fixture().join(name), src.join(name)).unwrap();
    }
    let mut edges = fs::read_to_string(fixture().join("edges.jsonl")).unwrap();
    edges.push_str(
        r#"{"id":"e_ghost","src":"gisela","dst":"nobody","relation":"r","text":"","embedding":[1,0,0,0,0,0,0,0],"chunks":[]}"#,
    );
    edges.push('\n');
    fs::write(src.join("edges.jsonl"), edges).unwrap();
    let out = tmp.path().join("out");
    let err = index_into(&src, &out).unwrap_err();
    match err {
        BundleError::Graph(GraphError::DanglingEndpoint { edge, node }) => {
            assert_eq!((edge.as_str(), node.as_str()), ("e_ghost", "nobody"));
        }
        other => panic!("unexpected {other}"),
    }
    assert!(!out.join(MANIFEST_FILE).exists());
}

#[test]
fn tampered_bundle_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("b");
    index_into(&fixture(), &dir).unwrap();
    assert!(Bundle::open(&dir, Some(8)).is_ok());
    assert!(matches!(
        Bundle::open(&dir, Some(16)),
        Err(BundleError::Dimension {
            expected: 16,
            found: 8
        })
    ));
    let path = dir.join("chunks.jsonl");
    let text = fs::read_to_string(&path).unwrap().replace("860", "861");
    fs::write(&path, text).unwrap();
    assert!(matches!(
        Bundle::open(&dir, None),
        Err(BundleError::Checksum { .. })
    ));
}
