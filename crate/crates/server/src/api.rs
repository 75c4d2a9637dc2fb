//! The user-facing HTTP API.
//!
//! | method | path | success |
//! |---|---|---|
//! | POST | `/{version}/request/`, `/{version}/fit-parameters/` | 201 `{"task_ID": ...}` |
//! | GET | `/{version}/{kind}/{task_ID}/status/` | 200 `{"status": ...}` |
//! | GET | `/{version}/{kind}/{task_ID}/result/` | 200 result payload |
//! | GET | `/{version}/openapi.json` | 200 OpenAPI document |
//!
//! Every response body is JSON. Errors carry `{"detail": ...}`.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::{to_bytes, Body};
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use esg_broker::{Broker, BrokerError, BrokerResult, Fetch};
use esg_core::schema::{emit_openapi, DocOptions};
use esg_core::{validate, Backoff, EndpointKind, ServiceSpec, SpecError, TaskEnvelope, TaskId, ValidationIssue, Verdict};
use serde_json::{json, Value};

use crate::auth::Authenticator;
use crate::Shutdown;

#[derive(Debug, Clone)]
pub struct ApiConfig {
    /// Largest accepted request body in bytes; larger bodies get 413.
    pub body_limit: usize,
    /// Retries of a transiently failing broker call before answering 503.
    pub broker_retries: u32,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig { body_limit: 10 * 1024 * 1024, broker_retries: 5 }
    }
}

struct Shared {
    spec: ServiceSpec,
    broker: Arc<dyn Broker>,
    auth: Arc<Authenticator>,
    config: ApiConfig,
    docs: HashMap<String, Value>,
}

/// Everything a request handler needs. Immutable apart from the broker.
#[derive(Clone)]
pub struct ApiState {
    shared: Arc<Shared>,
}

impl ApiState {
    pub fn new(
        spec: ServiceSpec,
        broker: Arc<dyn Broker>,
        auth: Arc<Authenticator>,
        config: ApiConfig,
    ) -> Result<Self, SpecError> {
        spec.check()?;
        let options = DocOptions { auth_enabled: auth.policy().enabled, docs_exempt: auth.policy().docs_exempt };
        let mut docs = HashMap::new();
        for (tag, _) in spec.versions() {
            let single = spec.only(tag.as_str()).expect("listed version exists");
            docs.insert(tag.to_string(), emit_openapi(&single, &options)?);
        }
        Ok(ApiState { shared: Arc::new(Shared { spec, broker, auth, config, docs }) })
    }

    pub fn authenticator(&self) -> &Arc<Authenticator> {
        &self.shared.auth
    }

    /// The document served at `/{version}/openapi.json`.
    pub fn openapi(&self, version: &str) -> Option<&Value> {
        self.shared.docs.get(version)
    }
}

/// Builds the router. Additional middleware (rate limiting, request
/// logging) can be attached with [`Router::layer`].
pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/{version}/openapi.json", get(openapi))
        .route("/{version}/{kind}/", post(submit))
        .route("/{version}/{kind}/{task_id}/status/", get(status))
        .route("/{version}/{kind}/{task_id}/result/", get(result))
        .fallback(fallback)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn_with_state(state.clone(), require_auth))
        .with_state(state)
}

fn detail(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "detail": message.into() }))).into_response()
}

fn not_found(message: impl Into<String>) -> Response {
    detail(StatusCode::NOT_FOUND, message)
}

fn rejected(issues: &[ValidationIssue]) -> Response {
    (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "detail": issues }))).into_response()
}

fn broker_failure(e: BrokerError) -> Response {
    match e {
        BrokerError::UnknownTask(_) => not_found("unknown task"),
        BrokerError::Unavailable(reason) => {
            tracing::error!(error = %reason, "broker unavailable");
            detail(StatusCode::SERVICE_UNAVAILABLE, "broker unavailable, retry later")
        }
        other => {
            tracing::error!(error = %other, "broker call failed");
            detail(StatusCode::INTERNAL_SERVER_ERROR, "internal broker error")
        }
    }
}

/// Runs a broker call on the blocking pool, retrying transient failures.
async fn call_broker<T: Send + 'static>(
    state: &ApiState,
    op: impl Fn(&dyn Broker) -> BrokerResult<T> + Send + 'static,
) -> BrokerResult<T> {
    let broker = state.shared.broker.clone();
    let retries = state.shared.config.broker_retries;
    tokio::task::spawn_blocking(move || Backoff::BROKER.retry(retries, BrokerError::is_transient, || op(&*broker)))
        .await
        .unwrap_or_else(|e| Err(BrokerError::Unavailable(format!("broker call aborted: {e}"))))
}

#[allow(clippy::result_large_err)] // the error is the finished response
fn route(state: &ApiState, version: &str, kind: &str) -> Result<EndpointKind, Response> {
    let kind: EndpointKind = kind.parse().map_err(|_| not_found(format!("no endpoint /{version}/{kind}/")))?;
    state.shared.spec.endpoint(version, kind).map_err(|e| not_found(e.to_string()))?;
    Ok(kind)
}

async fn submit(State(state): State<ApiState>, Path((version, kind)): Path<(String, String)>, body: Body) -> Response {
    let kind = match route(&state, &version, &kind) {
        Ok(kind) => kind,
        Err(response) => return response,
    };
    let limit = state.shared.config.body_limit;
    let bytes = match to_bytes(body, limit).await {
        Ok(b) => b,
        Err(_) => return detail(StatusCode::PAYLOAD_TOO_LARGE, format!("request body exceeds {limit} bytes")),
    };
    let payload: Value = match serde_json::from_slice(&bytes) {
        Ok(v) => v,
        Err(e) => return rejected(&[ValidationIssue { loc: String::new(), msg: format!("invalid JSON: {e}") }]),
    };
    let endpoint = state.shared.spec.endpoint(&version, kind).expect("route resolved above");
    if let Err(errors) = validate(&endpoint.input, &payload) {
        return rejected(errors.issues());
    }
    let tag = esg_core::VersionTag::new(&version).expect("route resolved above");
    let envelope = TaskEnvelope::new(kind, tag, payload);
    let task_id = envelope.task_id;
    let envelope = Arc::new(envelope);
    match call_broker(&state, move |b| b.enqueue(&envelope)).await {
        Ok(()) => {
            tracing::info!(task_id = %task_id, version = %version, kind = kind.as_str(), "task submitted");
            let location = format!("/{version}/{}/{task_id}/status/", kind.as_str());
            let mut response = (StatusCode::CREATED, Json(json!({ "task_ID": task_id }))).into_response();
            if let Ok(value) = HeaderValue::from_str(&location) {
                response.headers_mut().insert(header::LOCATION, value);
            }
            response
        }
        Err(e) => broker_failure(e),
    }
}

#[allow(clippy::result_large_err)] // the error is the finished response
fn task_route(state: &ApiState, version: &str, kind: &str, task_id: &str) -> Result<TaskId, Response> {
    route(state, version, kind)?;
    task_id.parse().map_err(|_| not_found("unknown task"))
}

async fn status(
    State(state): State<ApiState>,
    Path((version, kind, task_id)): Path<(String, String, String)>,
) -> Response {
    let id = match task_route(&state, &version, &kind, &task_id) {
        Ok(id) => id,
        Err(response) => return response,
    };
    match call_broker(&state, move |b| b.get_status(id)).await {
        Ok(status) => Json(json!({ "status": status.as_str() })).into_response(),
        Err(e) => broker_failure(e),
    }
}

async fn result(
    State(state): State<ApiState>,
    Path((version, kind, task_id)): Path<(String, String, String)>,
) -> Response {
    let id = match task_route(&state, &version, &kind, &task_id) {
        Ok(id) => id,
        Err(response) => return response,
    };
    match call_broker(&state, move |b| b.fetch_outcome(id, esg_core::time::now())).await {
        Ok(Fetch::NotReady) => detail(StatusCode::CONFLICT, "result not ready"),
        Ok(Fetch::Ready(outcome)) => match outcome.verdict() {
            Verdict::Success => {
                Json(outcome.result_payload().cloned().unwrap_or(Value::Null)).into_response()
            }
            Verdict::Failure => {
                detail(StatusCode::INTERNAL_SERVER_ERROR, outcome.error_detail().unwrap_or("task failed"))
            }
        },
        Err(e) => broker_failure(e),
    }
}

async fn openapi(State(state): State<ApiState>, Path(version): Path<String>) -> Response {
    match state.openapi(&version) {
        Some(doc) => Json(doc.clone()).into_response(),
        None => not_found(format!("unknown version {version}")),
    }
}

/// Whether appending a slash to `path` yields one of the canonical routes.
fn slash_less_route(path: &str) -> bool {
    if path.ends_with('/') {
        return false;
    }
    let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    match segments.as_slice() {
        [v, kind] => !v.is_empty() && !kind.is_empty() && *kind != "openapi.json",
        [v, kind, id, leaf] => ![v, kind, id].iter().any(|s| s.is_empty()) && matches!(*leaf, "status" | "result"),
        _ => false,
    }
}

async fn fallback(uri: Uri) -> Response {
    if slash_less_route(uri.path()) {
        let target = match uri.query() {
            Some(q) => format!("{}/?{q}", uri.path()),
            None => format!("{}/", uri.path()),
        };
        let mut response = detail(StatusCode::PERMANENT_REDIRECT, format!("moved to {target}"));
        if let Ok(value) = HeaderValue::from_str(&target) {
            response.headers_mut().insert(header::LOCATION, value);
        }
        return response;
    }
    not_found("not found")
}

async fn method_not_allowed(method: Method) -> Response {
    detail(StatusCode::METHOD_NOT_ALLOWED, format!("method {method} not allowed"))
}

fn is_docs_path(path: &str) -> bool {
    let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    matches!(segments.as_slice(), [v, "openapi.json"] if !v.is_empty())
}

async fn require_auth(State(state): State<ApiState>, mut request: Request, next: Next) -> Response {
    let auth = &state.shared.auth;
    if !auth.policy().enabled || (auth.policy().docs_exempt && is_docs_path(request.uri().path())) {
        return next.run(request).await;
    }
    match auth.authenticate_async(request.headers()).await {
        Ok(claims) => {
            request.extensions_mut().insert(claims);
            next.run(request).await
        }
        Err(denied) => {
            let mut response = detail(denied.status, denied.reason);
            if denied.status == StatusCode::UNAUTHORIZED {
                response.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
            }
            response
        }
    }
}

/// An API process serving on its own runtime thread.
pub struct ApiServer {
    addr: SocketAddr,
    shutdown: Shutdown,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ApiServer {
    pub fn start(bind: impl ToSocketAddrs, state: ApiState) -> io::Result<ApiServer> {
        Self::start_with_shutdown(bind, state, Shutdown::new())
    }

    /// Binds, fetches JWKS keys once (if configured) and serves until
    /// `shutdown` fires. In-flight requests are completed first.
    pub fn start_with_shutdown(bind: impl ToSocketAddrs, state: ApiState, shutdown: Shutdown) -> io::Result<ApiServer> {
        let listener = std::net::TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().thread_name("esg-api").build()?;
        let stop = shutdown.clone();
        let thread = std::thread::Builder::new().name("esg-api-main".into()).spawn(move || {
            runtime.block_on(async move {
                let auth = state.authenticator().clone();
                if auth.policy().enabled {
                    if let Err(e) = auth.refresh().await {
                        tracing::warn!(error = %e, "initial JWKS fetch failed");
                    }
                }
                let refresher = auth.spawn_refresher(stop.clone());
                let listener = tokio::net::TcpListener::from_std(listener)?;
                tracing::info!(addr = %addr, "API listening");
                let signal = stop.clone();
                let served = axum::serve(listener, router(state))
                    .with_graceful_shutdown(async move { signal.triggered().await })
                    .await;
                if let Some(r) = refresher {
                    r.abort();
                }
                served
            })
        })?;
        Ok(ApiServer { addr, shutdown, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `http://host:port` of the listener.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn join(mut self) -> io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("API thread panicked"))),
            None => Ok(()),
        }
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown.trigger();
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("API thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.shutdown.trigger();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
