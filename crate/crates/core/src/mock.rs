//! Scripted chat-completions server for tests and offline demos.
//!
//! The script maps each incoming request (and its 1-based sequence number) to
//! a reply. The server records what it saw, including the peak number of
//! concurrently open requests.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::time::Instant;

use crate::gateway::wire::{ChatRequest, ChatResponse};
use crate::gateway::{ChatEndpoint, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockReply {
    Text(String),
    /// Respond with this HTTP status and no completion.
    Status(u16),
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }
}

pub type Script = Arc<dyn Fn(&ChatRequest, u64) -> MockReply + Send + Sync>;

#[derive(Debug, Default)]
pub struct MockStats {
    in_flight: AtomicU64,
    peak_in_flight: AtomicU64,
    total: AtomicU64,
    arrivals: Mutex<Vec<Instant>>,
    requests: Mutex<Vec<ChatRequest>>,
    auth: Mutex<Vec<Option<String>>>,
}

impl MockStats {
    pub fn total(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> u64 {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn arrivals(&self) -> Vec<Instant> {
        self.arrivals.lock().unwrap().clone()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.auth.lock().unwrap().clone()
    }
}

#[derive(Clone)]
struct MockState {
    script: Script,
    latency: Duration,
    stats: Arc<MockStats>,
}

async fn completions(State(state): State<MockState>, headers: HeaderMap, Json(req): Json<ChatRequest>) -> Response {
    let stats = &state.stats;
    let seq = stats.total.fetch_add(1, Ordering::SeqCst) + 1;
    let now_open = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stats.peak_in_flight.fetch_max(now_open, Ordering::SeqCst);
    stats.arrivals.lock().unwrap().push(Instant::now());
    stats.auth.lock().unwrap().push(
        headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned),
    );

    if !state.latency.is_zero() {
        tokio::time::sleep(state.latency).await;
    }
    let reply = (state.script)(&req, seq);
    stats.requests.lock().unwrap().push(req);
    stats.in_flight.fetch_sub(1, Ordering::SeqCst);

    match reply {
        MockReply::Text(text) => Json(ChatResponse::assistant(text)).into_response(),
        MockReply::Status(code) => (
            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            "scripted failure",
        )
            .into_response(),
    }
}

pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<MockStats>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
}

impl MockServer {
    pub async fn start(script: Script) -> Self {
        Self::start_with_latency(script, Duration::ZERO).await
    }

    /// Every request is held for `latency` before the script answers.
    pub async fn start_with_latency(script: Script, latency: Duration) -> Self {
        let stats = Arc::new(MockStats::default());
        let app = Router::new()
            .route("/v1/chat/completions", post(completions))
            .with_state(MockState {
                script,
                latency,
                stats: stats.clone(),
            });
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind mock server");
        let addr = listener.local_addr().expect("local addr");
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Self {
            addr,
            stats,
            shutdown: Some(tx),
        }
    }

    /// Replies `text` to everything.
    pub async fn always(text: &str) -> Self {
        let text = text.to_owned();
        Self::start(Arc::new(move |_, _| MockReply::Text(text.clone()))).await
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stats(&self) -> &Arc<MockStats> {
        &self.stats
    }

    /// An endpoint config pointing at this server with millisecond backoff.
    pub fn endpoint(&self, name: &str, api_key_ref: &str) -> ChatEndpoint {
        ChatEndpoint {
            name: name.into(),
            base_url: self.base_url(),
            api_key_ref: api_key_ref.into(),
            model_id: format!("mock-{name}"),
            max_in_flight: 4,
            requests_per_minute: 10_000,
            timeout_seconds: 10,
            retry: RetryPolicy {
                base_delay_ms: 1,
                factor: 2,
                max_attempts: 5,
            },
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
