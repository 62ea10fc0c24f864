use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

/// What the stub does with one request.
#[derive(Clone)]
pub enum Reply {
    Chat(String),
    Embed(Vec<Vec<f64>>),
    Status(u16),
}

/// Scripted OpenAI-compatible endpoint. Queued replies are served first,
/// then the fallback repeats.
#[derive(Clone)]
pub struct Stub {
    pub queue: Arc<Mutex<VecDeque<Reply>>>,
    pub fallback: Arc<dyn Fn(&Value) -> Reply + Send + Sync>,
    pub delay: Duration,
    pub hits: Arc<AtomicUsize>,
    pub in_flight: Arc<AtomicUsize>,
    pub peak: Arc<AtomicUsize>,
}

impl Stub {
    pub fn new(fallback: impl Fn(&Value) -> Reply + Send + Sync + 'static) -> Self {
        Self {
            queue: Arc::default(),
            fallback: Arc::new(fallback),
            delay: Duration::ZERO,
            hits: Arc::default(),
            in_flight: Arc::default(),
            peak: Arc::default(),
        }
    }

    pub fn then(self, replies: impl IntoIterator<Item = Reply>) -> Self {
        self.queue.lock().unwrap().extend(replies);
        self
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Serves on an ephemeral port and returns the `/v1` base URL.
    pub async fn serve(&self) -> String {
        let app = Router::new()
            .route("/v1/chat/completions", post(handle))
            .route("/v1/embeddings", post(handle))
            .with_state(self.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr: SocketAddr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        format!("http://{addr}/v1")
    }
}

pub fn user_message(body: &Value) -> String {
    body["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string()
}

async fn handle(State(stub): State<Stub>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    stub.hits.fetch_add(1, Ordering::SeqCst);
    let now = stub.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stub.peak.fetch_max(now, Ordering::SeqCst);
    if !stub.delay.is_zero() {
        tokio::time::sleep(stub.delay).await;
    }
    let reply = stub.queue.lock().unwrap().pop_front();
    let reply = reply.unwrap_or_else(|| (stub.fallback)(&body));
    stub.in_flight.fetch_sub(1, Ordering::SeqCst);
    match reply {
        Reply::Chat(text) => (
            StatusCode::OK,
            Json(json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]})),
        ),
        Reply::Embed(vectors) => {
            let data: Vec<Value> = vectors
                .into_iter()
                .enumerate()
                .map(|(i, v)| json!({"index": i, "embedding": v}))
                .collect();
            (StatusCode::OK, Json(json!({"data": data})))
        }
        Reply::Status(code) => (
            StatusCode::from_u16(code).unwrap(),
            Json(json!({"error": {"message": "scripted failure"}})),
        ),
    }
}
