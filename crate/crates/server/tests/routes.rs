use std::fs;
use std::path::{Path, PathBuf};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use bubblerag_server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

const QUERY: &str = "When did Lothair II's mother die?";

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/lothair")
}

fn copy_fixture(to: &Path) {
    for entry in fs::read_dir(fixture()).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, to.join(p.file_name().unwrap())).unwrap();
    }
}

fn query_body(bundle: &Path) -> Value {
    let config: Value =
        serde_json::from_str(&fs::read_to_string(bundle.join("config.json")).unwrap()).unwrap();
    let mut config = config;
    // relative paths in a config resolve against its own directory
    for key in [("provider", "path"), ("reasoner", "fixtures")] {
        let rel = config[key.0][key.1].as_str().unwrap().to_string();
        config[key.0][key.1] = json!(bundle.join(rel));
    }
    json!({"bundle": bundle, "config": config, "query": QUERY, "flags": {"explain": true}})
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

async fn post(app: &Router, uri: &str, body: &Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(body.to_string())).await
}

#[tokio::test]
async fn health() {
    let app = router(AppState::default());
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn query_answers_and_caches_the_bundle() {
    let state = AppState::default();
    let app = router(state.clone());
    let body = query_body(&fixture());
    let (status, first) = post(&app, "/v1/query", &body).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    assert_eq!(first["answer"], "860 AD");
    assert!(first["output"].as_str().unwrap().contains("# explain\n"));
    assert!(!first["timings"].as_array().unwrap().is_empty());
    let (_, second) = post(&app, "/v1/query", &body).await;
    assert_eq!(first["output"], second["output"]);
    assert_eq!(state.bundles.len(), 1);
}

#[tokio::test]
async fn error_kinds_map_to_statuses() {
    let app = router(AppState::default());

    let (status, body) = call(&app, "POST", "/v1/query", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["kind"], "invalid");

    let missing = json!({"bundle": "/nonexistent/bundle", "query": QUERY});
    let (status, body) = post(&app, "/v1/query", &missing).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["message"]
        .as_str()
        .unwrap()
        .contains("/nonexistent/bundle"));

    let mut unknown_text = query_body(&fixture());
    unknown_text["query"] = json!("Who built Atlantis?");
    let (status, body) = post(&app, "/v1/query", &unknown_text).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{body}");
    assert_eq!(body["kind"], "backend");
}

#[tokio::test]
async fn ungroundable_query_is_unprocessable() {
    let tmp = tempfile::tempdir().unwrap();
    copy_fixture(tmp.path());
    let extra = json!({"kind": "KeywordExtract", "query": QUERY, "response": {"keywords": [{"text": "Atlantis"}]}});
    let path = tmp.path().join("fixtures.jsonl");
    let text = fs::read_to_string(&path).unwrap() + &format!("{extra}\n");
    fs::write(&path, text).unwrap();

    let app = router(AppState::default());
    let (status, body) = post(&app, "/v1/query", &query_body(tmp.path())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    assert_eq!(body["kind"], "no_anchors");
}

#[tokio::test]
async fn synth_then_query_the_result() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("kg");
    let app = router(AppState::default());
    let (status, synth) = post(&app, "/v1/synth", &json!({"spec": {"seed": 5}, "out": out})).await;
    assert_eq!(status, StatusCode::OK, "{synth}");
    assert_eq!(synth["manifest"]["nodes"], 9);

    let mut body = query_body(&out);
    body["query"] = synth["truth"]["query"].clone();
    let (status, resp) = post(&app, "/v1/query", &body).await;
    assert_eq!(status, StatusCode::OK, "{resp}");
    assert!(!resp["answer"].as_str().unwrap().is_empty());
}

#[tokio::test]
async fn oracle_route() {
    let app = router(AppState::default());
    let instance = json!({
        "nodes": [{"id": "a", "val": 0.9}, {"id": "b", "val": 0.1}, {"id": "c", "val": 0.8}],
        "edges": [{"id": "ab", "src": "a", "dst": "b", "val": 0.5}, {"id": "bc", "src": "b", "dst": "c", "val": 0.5}],
        "groups": [["n:a"], ["n:c"]]
    });
    let (status, body) = post(&app, "/v1/oracle", &json!({"instance": instance})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["feasible"], true);
    // the only connected cover is the whole path
    let phi = (0.9 + 0.1 + 0.8 + 0.5 + 0.5) / 5.0;
    assert!((body["phi"].as_f64().unwrap() - phi).abs() < 1e-12);

    let (status, body) = post(
        &app,
        "/v1/oracle",
        &json!({"instance": instance, "n_max": 2}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
}
