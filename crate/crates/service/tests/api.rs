use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use gridsearch_core::dataset::{KeyframeEntry, KeyframeManifest};
use gridsearch_core::embed::{EmbedderConfig, HashEmbedder};
use gridsearch_core::geometry::RegionSet;
use gridsearch_core::store::{store_file_name, EmbeddingStore};
use gridsearch_service::{router, AppState, Config};

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = KeyframeManifest::from_entries(
        (0..30)
            .map(|i| KeyframeEntry {
                image_id: format!("v1_{i:03}"),
                width: 320,
                height: 180,
                uri: format!("v1/{i:03}.jpg"),
            })
            .collect(),
    )
    .unwrap();
    manifest.write(root.join("manifest.jsonl")).unwrap();
    std::fs::create_dir_all(root.join("stores")).unwrap();
    let e = HashEmbedder::new(16);
    for rs in ["whole", "static5", "static9", "static9@e=0.1"] {
        let rs: RegionSet = rs.parse().unwrap();
        EmbeddingStore::from_embedder(&manifest, rs, &e)
            .unwrap()
            .save(root.join("stores").join(store_file_name(&rs.id())))
            .unwrap();
    }
    std::fs::create_dir_all(root.join("thumbs/v1")).unwrap();
    std::fs::write(root.join("thumbs/v1/000.jpg"), b"jpeg-bytes").unwrap();
    std::fs::create_dir_all(root.join("reports")).unwrap();
    std::fs::write(root.join("reports/abc123.json"), r#"{"metrics": {"r1": 50.0}}"#).unwrap();

    let config = Config {
        manifest: Some(root.join("manifest.jsonl")),
        store_dir: Some(root.join("stores")),
        reports_dir: Some(root.join("reports")),
        thumbnail_root: Some(root.join("thumbs")),
        embedder: EmbedderConfig::Synthetic { dim: 16, model_id: None },
        ..Config::default()
    };
    let state = AppState::from_config(&config).unwrap();
    Fixture {
        app: router(state, config.thumbnail_root.clone()),
        _dir: dir,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn whole_image_query_returns_top_k_without_cells() {
    let f = fixture();
    let (s, v) = call_json(&f.app, "POST", "/v1/query", Some(json!({"text": "a diver", "model": "whole-image", "top_k": 10}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let hits = v["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 10);
    assert!(hits.iter().all(|h| h["matched_cell_ids"].as_array().unwrap().is_empty()));
    assert!(v["timing_ms"].is_number());
    assert_eq!(v["query"]["model"], "whole-image");
}

#[tokio::test]
async fn grid_query_hits_use_selected_cells() {
    let f = fixture();
    let body = json!({"text": "a diver", "model": "static5", "box": [0.05, 0.05, 0.3, 0.3], "top_k": 30});
    let (s, v) = call_json(&f.app, "POST", "/v1/query", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let selected: Vec<&str> = v["selected_cell_ids"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert_eq!(selected, ["top-left", "center"]);
    for h in v["hits"].as_array().unwrap() {
        for c in h["matched_cell_ids"].as_array().unwrap() {
            assert!(selected.contains(&c.as_str().unwrap()));
        }
    }
}

#[tokio::test]
async fn query_is_repeatable() {
    let f = fixture();
    let body = json!({"text": "reef", "model": "static9", "box": [0.4, 0.4, 0.7, 0.6], "enlargement": 0.1, "selection_mode": "argmax_iou"});
    let (_, mut a) = call_json(&f.app, "POST", "/v1/query", Some(body.clone())).await;
    let (_, mut b) = call_json(&f.app, "POST", "/v1/query", Some(body)).await;
    a.as_object_mut().unwrap().remove("timing_ms");
    b.as_object_mut().unwrap().remove("timing_ms");
    assert_eq!(a, b);
    assert_eq!(a["region_set_id"], "static9@e=0.1");
}

#[tokio::test]
async fn query_errors() {
    let f = fixture();
    let (s, v) = call_json(&f.app, "POST", "/v1/query", Some(json!({"text": "x", "model": "static9", "box": [0.5, 0.1, 0.2, 0.3]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["field"], "box");
    let (s, _) = call_json(&f.app, "POST", "/v1/query", Some(json!({"text": "x", "model": "static5"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call_json(&f.app, "POST", "/v1/query", Some(json!({"text": "x", "model": "whole-image", "top_k": 5000}))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(v["error"]["field"], "top_k");
    let (s, _) = call_json(&f.app, "POST", "/v1/query", Some(json!({"text": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn grids_and_models() {
    let f = fixture();
    let (s, grids) = call_json(&f.app, "GET", "/v1/grids", None).await;
    assert_eq!(s, StatusCode::OK);
    let g = grids.as_array().unwrap();
    assert_eq!(g[0]["region_set_id"], "static5");
    assert_eq!(g[0]["cells"][4], json!({"id": "center", "box": [0.25, 0.25, 0.75, 0.75]}));
    assert_eq!(g[1]["cells"][4]["box"], json!([1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]));
    assert_eq!(g[2]["region_set_id"], "static9@e=0.1");

    let (_, models) = call_json(&f.app, "GET", "/v1/models", None).await;
    let names: Vec<&str> = models.as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap()).collect();
    for want in ["whole-image", "append-long", "append-short", "static5", "static9", "theoretical"] {
        assert!(names.contains(&want));
    }
}

#[tokio::test]
async fn reports_and_thumbnails() {
    let f = fixture();
    let (s, v) = call_json(&f.app, "GET", "/v1/reports/abc123", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["metrics"]["r1"], 50.0);
    let (s, _) = call_json(&f.app, "GET", "/v1/reports/unknown", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&f.app, "GET", "/v1/reports/..%2Fmanifest", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, ids) = call_json(&f.app, "GET", "/v1/reports", None).await;
    assert_eq!(ids, json!(["abc123"]));

    let (_, q) = call_json(&f.app, "POST", "/v1/query", Some(json!({"text": "a", "model": "whole-image", "top_k": 30}))).await;
    let uri = q["hits"].as_array().unwrap().iter().find(|h| h["image_id"] == "v1_000").unwrap()["thumbnail_uri"]
        .as_str()
        .unwrap()
        .to_string();
    assert_eq!(uri, "/thumbnails/v1/000.jpg");
    let (s, bytes) = call(&f.app, "GET", &uri, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, b"jpeg-bytes");
}
