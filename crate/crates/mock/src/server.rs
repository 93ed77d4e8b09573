use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::profile::MockProfile;
use crate::MockError;

/// Declared prompt length; overrides the character-count estimate.
pub const PROMPT_TOKENS_HEADER: &str = "x-prompt-tokens";
/// Optional client request id, echoed into the emission log.
pub const REQUEST_ID_HEADER: &str = "x-request-id";

const ROUTE: &str = "/v1/chat/completions";
const DEFAULT_MAX_TOKENS: u32 = 256;
const TOKEN_TEXT: &str = "tok ";
// How long before the first-token deadline the timer hands over to a
// yield loop. Tokio timers round up to the next millisecond, which would
// otherwise bias every measured prefill latency upwards.
const SPIN_WINDOW: Duration = Duration::from_millis(2);

/// Ground-truth record of one emitted stream event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEmission {
    pub request_id: String,
    pub prompt_tokens: u32,
    /// Seconds since the request was accepted.
    pub offset_s: f64,
    /// Seconds since the server started.
    pub server_time_s: f64,
    pub token_count: u32,
    pub overload_factor: f64,
}

struct Shared {
    profile: MockProfile,
    epoch: Instant,
    in_flight: AtomicUsize,
    next_stream: AtomicU64,
    // Running (sum, count) of nominal service times of admitted requests.
    service: Mutex<(f64, u64)>,
    log: Mutex<Vec<LoggedEmission>>,
}

impl Shared {
    fn overload_factor(&self) -> f64 {
        let Some(knee) = self.profile.knee_qps else {
            return 1.0;
        };
        let (sum, n) = *self.service.lock().unwrap();
        if n == 0 {
            return 1.0;
        }
        let allowed = knee * sum / n as f64;
        let in_flight = self.in_flight.load(Ordering::SeqCst) as f64;
        (in_flight / allowed).max(1.0)
    }
}

struct InFlight(Arc<Shared>);

impl Drop for InFlight {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Deserialize)]
struct ChatRequest {
    #[serde(default)]
    model: Option<String>,
    messages: Vec<ChatMessage>,
    #[serde(default)]
    max_tokens: Option<u32>,
    #[serde(default)]
    max_completion_tokens: Option<u32>,
    #[serde(default)]
    stream: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[allow(dead_code)]
    role: String,
    content: String,
}

fn bad_request(message: impl Into<String>) -> Response {
    let body = json!({"error": {"message": message.into(), "type": "invalid_request_error"}});
    (StatusCode::BAD_REQUEST, axum::Json(body)).into_response()
}

fn frame(value: &serde_json::Value) -> Bytes {
    Bytes::from(format!("data: {value}\n\n"))
}

fn chunk(id: &str, model: &str, delta: serde_json::Value, finish: Option<&str>) -> Bytes {
    frame(&json!({
        "id": id,
        "object": "chat.completion.chunk",
        "created": 0,
        "model": model,
        "choices": [{"index": 0, "delta": delta, "finish_reason": finish}],
    }))
}

async fn sleep_precise(target: Instant) {
    if let Some(early) = target.checked_sub(SPIN_WINDOW) {
        tokio::time::sleep_until(early.into()).await;
    }
    while Instant::now() < target {
        tokio::task::yield_now().await;
    }
}

async fn completions(State(shared): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    let accepted = Instant::now();
    let request: ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("malformed request body: {e}")),
    };
    if request.stream != Some(true) {
        return bad_request("only streaming requests (stream: true) are supported");
    }
    let max_tokens = request
        .max_tokens
        .or(request.max_completion_tokens)
        .unwrap_or(DEFAULT_MAX_TOKENS);
    if max_tokens == 0 {
        return bad_request("max_tokens must be at least 1");
    }
    let prompt_tokens = match headers.get(PROMPT_TOKENS_HEADER) {
        Some(v) => match v.to_str().ok().and_then(|s| s.trim().parse::<u32>().ok()) {
            Some(p) => p,
            None => return bad_request(format!("{PROMPT_TOKENS_HEADER} must be a non-negative integer")),
        },
        None => {
            let chars: usize = request.messages.iter().map(|m| m.content.chars().count()).sum();
            u32::try_from(chars.div_ceil(4)).unwrap_or(u32::MAX)
        }
    };
    let stream_id = shared.next_stream.fetch_add(1, Ordering::SeqCst);
    let request_id = headers
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .map_or_else(|| format!("mock-{stream_id}"), str::to_owned);
    let model = request.model.unwrap_or_else(|| "mock".into());

    let plan = shared.profile.plan(prompt_tokens, max_tokens, stream_id);
    let nominal = plan.first_token_s + plan.steps.iter().map(|s| s.cadence_s + s.stall_s).sum::<f64>();
    {
        let mut service = shared.service.lock().unwrap();
        service.0 += nominal;
        service.1 += 1;
    }
    shared.in_flight.fetch_add(1, Ordering::SeqCst);
    let guard = InFlight(shared.clone());

    let (tx, rx) = mpsc::channel::<Result<Bytes, std::io::Error>>(64);
    tokio::spawn(async move {
        let _guard = guard;
        let shared = &_guard.0;
        let id = format!("chatcmpl-{stream_id}");
        let abort_after = shared.profile.abort_after_tokens;
        if tx
            .send(Ok(chunk(
                &id,
                &model,
                json!({"role": "assistant", "content": ""}),
                None,
            )))
            .await
            .is_err()
        {
            return;
        }
        let mut target = accepted + Duration::from_secs_f64(plan.first_token_s);
        let mut factor = 1.0;
        let mut emitted = 0u32;
        let groups = std::iter::once((plan.first_tokens, 0.0, 0.0))
            .chain(plan.steps.iter().map(|s| (s.tokens, s.cadence_s, s.stall_s)));
        for (i, (tokens, cadence, stall)) in groups.enumerate() {
            if tokens == 0 {
                break;
            }
            if i == 0 {
                sleep_precise(target).await;
            } else {
                factor = shared.overload_factor();
                target += Duration::from_secs_f64(cadence * factor + stall);
                tokio::time::sleep_until(target.into()).await;
            }
            if abort_after.is_some_and(|n| emitted >= n) {
                let _ = tx.send(Err(std::io::Error::other("stream aborted by profile"))).await;
                return;
            }
            let now = Instant::now();
            let content = TOKEN_TEXT.repeat(tokens as usize);
            if tx
                .send(Ok(chunk(&id, &model, json!({"content": content}), None)))
                .await
                .is_err()
            {
                return;
            }
            emitted += tokens;
            shared.log.lock().unwrap().push(LoggedEmission {
                request_id: request_id.clone(),
                prompt_tokens,
                offset_s: now.duration_since(accepted).as_secs_f64(),
                server_time_s: now.duration_since(shared.epoch).as_secs_f64(),
                token_count: tokens,
                overload_factor: factor,
            });
        }
        if abort_after.is_some_and(|n| emitted >= n) {
            let _ = tx.send(Err(std::io::Error::other("stream aborted by profile"))).await;
            return;
        }
        let _ = tx.send(Ok(chunk(&id, &model, json!({}), Some("length")))).await;
        let _ = tx.send(Ok(Bytes::from_static(b"data: [DONE]\n\n"))).await;
    });

    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|item| (item, rx)) });
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(stream))
        .expect("static response parts")
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new().route(ROUTE, post(completions)).with_state(shared)
}

fn shared_state(profile: MockProfile) -> Result<Arc<Shared>, MockError> {
    profile.validate()?;
    Ok(Arc::new(Shared {
        profile,
        epoch: Instant::now(),
        in_flight: AtomicUsize::new(0),
        next_stream: AtomicU64::new(0),
        service: Mutex::new((0.0, 0)),
        log: Mutex::new(Vec::new()),
    }))
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, MockError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| MockError::Bind { addr, source })
}

fn app_service(
    listener: TcpListener,
    shared: Arc<Shared>,
) -> axum::serve::Serve<
    axum::serve::TapIo<TcpListener, impl FnMut(&mut tokio::net::TcpStream) + Send + 'static>,
    Router,
    Router,
> {
    use axum::serve::ListenerExt;
    // Stream chunks are tiny; without TCP_NODELAY they can sit behind
    // delayed ACKs for tens of milliseconds.
    let listener = listener.tap_io(|tcp| {
        let _ = tcp.set_nodelay(true);
    });
    axum::serve(listener, router(shared))
}

/// A mock endpoint running on the current tokio runtime.
pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<std::io::Result<()>>>,
}

impl MockServer {
    /// Bind `addr` (port 0 picks a free port) and start serving.
    pub async fn start(profile: MockProfile, addr: SocketAddr) -> Result<Self, MockError> {
        let shared = shared_state(profile)?;
        let listener = bind(addr).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let service = app_service(listener, shared.clone()).with_graceful_shutdown(async move {
            let _ = rx.await;
        });
        let task = tokio::spawn(async move { service.await });
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn in_flight(&self) -> usize {
        self.shared.in_flight.load(Ordering::SeqCst)
    }

    /// Snapshot of every emission so far, in emission order.
    pub fn emissions(&self) -> Vec<LoggedEmission> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<(), MockError> {
        write_log(&self.emissions(), path.as_ref())
    }

    /// Stop accepting connections and wait for open streams to finish.
    pub async fn shutdown(mut self) -> Result<(), MockError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            task.await.map_err(std::io::Error::other)??;
        }
        Ok(())
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}

fn write_log(log: &[LoggedEmission], path: &Path) -> Result<(), MockError> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in log {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Serve until ctrl-c, then optionally write the emission log.
pub async fn serve(profile: MockProfile, addr: SocketAddr, log_path: Option<&Path>) -> Result<(), MockError> {
    let shared = shared_state(profile)?;
    let listener = bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "mock endpoint listening");
    app_service(listener, shared.clone())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if let Some(path) = log_path {
        write_log(&shared.log.lock().unwrap(), path)?;
    }
    Ok(())
}
