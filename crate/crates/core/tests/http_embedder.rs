use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use gridsearch_core::embed::{EmbedError, Embedder, EmbedderEndpoint, HttpEmbedder, RetryPolicy};
use gridsearch_core::geometry::Rect;

#[derive(Clone, Default)]
struct Mock {
    text_calls: Arc<AtomicUsize>,
    crop_calls: Arc<AtomicUsize>,
    /// Requests to fail with 503 before answering.
    failures: Arc<AtomicUsize>,
    /// Dimension of returned vectors.
    dim: usize,
}

async fn text(State(m): State<Mock>, Json(body): Json<Value>) -> Result<Json<Value>, (StatusCode, String)> {
    m.text_calls.fetch_add(1, Ordering::SeqCst);
    if m.failures.load(Ordering::SeqCst) > 0 {
        m.failures.fetch_sub(1, Ordering::SeqCst);
        return Err((StatusCode::SERVICE_UNAVAILABLE, "busy".into()));
    }
    let texts = body["texts"].as_array().unwrap();
    let vectors: Vec<Vec<f32>> = texts
        .iter()
        .map(|t| {
            let mut v = vec![0.0f32; m.dim];
            v[t.as_str().unwrap().len() % m.dim] = 3.0;
            v
        })
        .collect();
    Ok(Json(json!({ "vectors": vectors })))
}

async fn crop(State(m): State<Mock>, Json(body): Json<Value>) -> Result<Json<Value>, (StatusCode, String)> {
    m.crop_calls.fetch_add(1, Ordering::SeqCst);
    if body["image_uri"] == "missing.jpg" {
        return Err((StatusCode::NOT_FOUND, "no such image".into()));
    }
    assert_eq!(body["box"].as_array().unwrap().len(), 4);
    let mut v = vec![0.0f32; m.dim];
    v[0] = 1.0;
    Ok(Json(json!({ "vectors": [v] })))
}

fn spawn(mock: Mock) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/v1/embed/text", post(text))
                .route("/v1/embed/crop", post(crop))
                .with_state(mock);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn endpoint(addr: SocketAddr, dim: usize) -> EmbedderEndpoint {
    let mut ep = EmbedderEndpoint::new(format!("http://{addr}"), "mock", dim);
    ep.retry = RetryPolicy {
        max_attempts: 3,
        backoff: Duration::from_millis(5),
    };
    ep.timeout = Duration::from_secs(5);
    ep
}

#[test]
fn batches_and_normalizes_text_vectors() {
    let mock = Mock {
        dim: 4,
        ..Mock::default()
    };
    let addr = spawn(mock.clone());
    let mut ep = endpoint(addr, 4);
    ep.max_batch = 2;
    let e = HttpEmbedder::new(ep);
    let texts: Vec<String> = ["a", "bb", "ccc", "dddd", "e"].iter().map(|s| s.to_string()).collect();
    let out = e.embed_texts(&texts).unwrap();
    assert_eq!(out.len(), 5);
    assert_eq!(out[1], vec![0.0, 0.0, 1.0, 0.0]);
    assert_eq!(mock.text_calls.load(Ordering::SeqCst), 3);
    assert_eq!(e.embed_text("   "), Err(EmbedError::EmptyText));
}

#[test]
fn retries_transient_failures() {
    let mock = Mock {
        dim: 4,
        failures: Arc::new(AtomicUsize::new(2)),
        ..Mock::default()
    };
    let addr = spawn(mock.clone());
    let e = HttpEmbedder::new(endpoint(addr, 4));
    assert!(e.embed_text("hello").is_ok());
    assert_eq!(mock.text_calls.load(Ordering::SeqCst), 3);

    mock.failures.store(10, Ordering::SeqCst);
    let err = e.embed_text("hello").unwrap_err();
    assert!(matches!(err, EmbedError::Status { status: 503, .. }), "{err:?}");
}

#[test]
fn rejects_wrong_dimension() {
    let addr = spawn(Mock {
        dim: 6,
        ..Mock::default()
    });
    let e = HttpEmbedder::new(endpoint(addr, 4));
    assert_eq!(
        e.embed_text("x"),
        Err(EmbedError::Dim {
            expected: 4,
            actual: 6
        })
    );
}

#[test]
fn crop_requests_and_missing_images() {
    let mock = Mock {
        dim: 4,
        ..Mock::default()
    };
    let addr = spawn(mock.clone());
    let e = HttpEmbedder::new(endpoint(addr, 4));
    let b = Rect::new(0.1, 0.1, 0.4, 0.4).unwrap();
    assert_eq!(e.embed_crop("k1", "k1.jpg", &b).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    let err = e.embed_crop("k2", "missing.jpg", &b).unwrap_err();
    assert!(matches!(err, EmbedError::ImageFetch { ref uri, .. } if uri == "missing.jpg"), "{err:?}");
    assert_eq!(mock.crop_calls.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_service_reports_attempts() {
    // Bind then drop to get a port nothing listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let e = HttpEmbedder::new(endpoint(port, 4));
    match e.embed_text("x") {
        Err(EmbedError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
}
