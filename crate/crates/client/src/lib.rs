//! Client for services built on the energy service gateway.
//!
//! Every call follows the same pattern: POST the input, poll the task's
//! status until it reads `ready`, then fetch the result once.
//!
//! ```no_run
//! use esg_client::{Client, PollPolicy};
//! use esg_core::EndpointKind;
//!
//! let client = Client::new("http://localhost:8000").unwrap();
//! let input = serde_json::json!({"x": 1});
//! let handle = client.submit("v1", EndpointKind::Request, &input).unwrap();
//! let result = client.wait(&handle, &PollPolicy::default()).unwrap();
//! ```

use std::time::{Duration, Instant};

use esg_core::{Backoff, EndpointKind, TaskId, ValidationIssue, VersionTag};
use reqwest::blocking::{RequestBuilder, Response};
use reqwest::StatusCode;
use serde_json::Value;

/// Everything needed to address one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskHandle {
    pub base_url: String,
    pub version: VersionTag,
    pub kind: EndpointKind,
    pub task_id: TaskId,
}

impl TaskHandle {
    pub fn submit_url(&self) -> String {
        submit_url(&self.base_url, &self.version, self.kind)
    }

    pub fn status_url(&self) -> String {
        format!("{}{}/status/", self.submit_url(), self.task_id)
    }

    pub fn result_url(&self) -> String {
        format!("{}{}/result/", self.submit_url(), self.task_id)
    }
}

fn submit_url(base_url: &str, version: &VersionTag, kind: EndpointKind) -> String {
    format!("{}/{}/{}/", base_url.trim_end_matches('/'), version, kind.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PollPolicy {
    /// Delays between status polls.
    pub backoff: Backoff,
    /// Give up after this long. `None` waits forever.
    pub max_wait: Option<Duration>,
}

impl Default for PollPolicy {
    fn default() -> Self {
        PollPolicy { backoff: Backoff::POLL, max_wait: Some(Duration::from_secs(600)) }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("input rejected: {}", describe_issues(.0))]
    ValidationRejected(Vec<ValidationIssue>),
    #[error("authentication rejected ({status}): {detail}")]
    AuthRejected { status: u16, detail: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("cannot reach {url}: {reason}")]
    Unreachable { url: String, reason: String },
    #[error("no result after {:.1} s", .waited.as_secs_f64())]
    TimedOut { waited: Duration },
    #[error("task failed: {0}")]
    TaskFailed(String),
    #[error("unexpected response {status}: {body}")]
    Unexpected { status: u16, body: String },
    #[error("parameter slot {0:?} does not exist in the request template")]
    BadSlot(String),
    #[error("{phase} phase: {source}")]
    Phase {
        phase: Phase,
        #[source]
        source: Box<ClientError>,
    },
}

impl ClientError {
    /// Strips [`ClientError::Phase`] wrappers.
    pub fn root(&self) -> &ClientError {
        match self {
            ClientError::Phase { source, .. } => source.root(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Fit,
    Request,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Fit => "fit",
            Phase::Request => "request",
        })
    }
}

fn describe_issues(issues: &[ValidationIssue]) -> String {
    let parts: Vec<String> = issues
        .iter()
        .map(|i| if i.loc.is_empty() { i.msg.clone() } else { format!("{}: {}", i.loc, i.msg) })
        .collect();
    parts.join("; ")
}

/// Result of [`Client::fit_then_request`]. Store `parameters` locally; the
/// service forgets them once its retention window passes.
#[derive(Debug, Clone, PartialEq)]
pub struct FitThenRequest {
    pub parameters: Value,
    pub result: Value,
    pub fit_task: TaskHandle,
    pub request_task: TaskHandle,
}

/// A blocking client bound to one service base URL. Cheap to clone and
/// safe to share between threads.
#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::blocking::Client,
    base_url: String,
    token: Option<String>,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ClientError> {
        let base_url = base_url.into();
        let http = reqwest::blocking::Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .timeout(Duration::from_secs(60))
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .map_err(|e| ClientError::Unreachable { url: base_url.clone(), reason: e.to_string() })?;
        Ok(Client { http, base_url, token: None })
    }

    /// Sends `token` as a bearer token on every call.
    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn authorized(&self, request: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => request.bearer_auth(t),
            None => request,
        }
    }

    fn send(&self, url: &str, request: RequestBuilder) -> Result<Response, ClientError> {
        self.authorized(request)
            .send()
            .map_err(|e| ClientError::Unreachable { url: url.to_string(), reason: e.to_string() })
    }

    /// Submits `input` and returns the handle of the new task. Submissions
    /// are not retried, since a lost response could otherwise create a
    /// duplicate task.
    pub fn submit(&self, version: &str, kind: EndpointKind, input: &Value) -> Result<TaskHandle, ClientError> {
        let version: VersionTag =
            version.parse().map_err(|e| ClientError::NotFound(format!("invalid version {version:?}: {e}")))?;
        let url = submit_url(&self.base_url, &version, kind);
        let response = self.send(&url, self.http.post(&url).json(input))?;
        if response.status() != StatusCode::CREATED {
            return Err(error_from(response));
        }
        let body: Value = read_json(response)?;
        let task_id = body
            .get("task_ID")
            .and_then(Value::as_str)
            .and_then(|s| s.parse::<TaskId>().ok())
            .ok_or_else(|| ClientError::Unexpected { status: 201, body: body.to_string() })?;
        Ok(TaskHandle { base_url: self.base_url.clone(), version, kind, task_id })
    }

    /// Polls until the task is ready, then fetches its result.
    ///
    /// Transient failures (unreachable service, 503) are retried until
    /// `max_wait` runs out. A timed out wait can be resumed with the same
    /// handle; results are kept until fetched.
    pub fn wait(&self, handle: &TaskHandle, policy: &PollPolicy) -> Result<Value, ClientError> {
        let started = Instant::now();
        let mut polls = 0u32;
        loop {
            let ready = match self.poll_status(handle) {
                Ok(ready) => ready,
                Err(ClientError::Unreachable { .. } | ClientError::ServiceUnavailable(_)) => false,
                Err(e) => return Err(e),
            };
            if ready {
                match self.fetch_result(handle) {
                    Ok(Some(result)) => return result,
                    // Only possible if the store was rolled back under us.
                    Ok(None) => {}
                    Err(ClientError::Unreachable { .. } | ClientError::ServiceUnavailable(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            let delay = policy.backoff.delay(polls);
            polls = polls.saturating_add(1);
            let delay = match policy.max_wait {
                Some(max) => {
                    let remaining = max.saturating_sub(started.elapsed());
                    if remaining.is_zero() {
                        return Err(ClientError::TimedOut { waited: started.elapsed() });
                    }
                    delay.min(remaining)
                }
                None => delay,
            };
            std::thread::sleep(delay);
        }
    }

    /// Whether the task's status is `ready`.
    pub fn poll_status(&self, handle: &TaskHandle) -> Result<bool, ClientError> {
        let url = handle.status_url();
        let response = self.send(&url, self.http.get(&url))?;
        if response.status() != StatusCode::OK {
            return Err(error_from(response));
        }
        let body = read_json(response)?;
        match body.get("status").and_then(Value::as_str) {
            Some("ready") => Ok(true),
            Some("queued" | "running") => Ok(false),
            _ => Err(ClientError::Unexpected { status: 200, body: body.to_string() }),
        }
    }

    /// Fetches the result of a ready task. `None` means not ready yet.
    fn fetch_result(&self, handle: &TaskHandle) -> Result<Option<Result<Value, ClientError>>, ClientError> {
        let url = handle.result_url();
        let response = self.send(&url, self.http.get(&url))?;
        match response.status() {
            StatusCode::OK => Ok(Some(Ok(read_json(response)?))),
            StatusCode::CONFLICT => Ok(None),
            StatusCode::INTERNAL_SERVER_ERROR => Ok(Some(Err(ClientError::TaskFailed(detail_of(response))))),
            _ => Err(error_from(response)),
        }
    }

    /// Submits and waits in one step.
    pub fn call(&self, version: &str, kind: EndpointKind, input: &Value, policy: &PollPolicy) -> Result<Value, ClientError> {
        let handle = self.submit(version, kind, input)?;
        self.wait(&handle, policy)
    }

    /// Fits user-specific parameters, inserts them into `request_template`
    /// at the JSON pointer `parameter_slot`, and requests with them.
    ///
    /// The parameters are the fit result's `parameters` member when it has
    /// one, otherwise the whole fit result.
    pub fn fit_then_request(
        &self,
        version: &str,
        fit_input: &Value,
        request_template: &Value,
        parameter_slot: &str,
        policy: &PollPolicy,
    ) -> Result<FitThenRequest, ClientError> {
        let in_phase = |phase| move |source| ClientError::Phase { phase, source: Box::new(source) };
        let mut request = request_template.clone();
        // Check the slot before spending a fit on a request that cannot be sent.
        insert_at(&mut request, parameter_slot, Value::Null).map_err(in_phase(Phase::Request))?;

        let fit_task = self.submit(version, EndpointKind::FitParameters, fit_input).map_err(in_phase(Phase::Fit))?;
        let fitted = self.wait(&fit_task, policy).map_err(in_phase(Phase::Fit))?;
        let parameters = match fitted.get("parameters") {
            Some(p) => p.clone(),
            None => fitted,
        };
        insert_at(&mut request, parameter_slot, parameters.clone()).map_err(in_phase(Phase::Request))?;
        let request_task = self.submit(version, EndpointKind::Request, &request).map_err(in_phase(Phase::Request))?;
        let result = self.wait(&request_task, policy).map_err(in_phase(Phase::Request))?;
        Ok(FitThenRequest { parameters, result, fit_task, request_task })
    }
}

/// Sets the member or element addressed by a JSON pointer. The parent must
/// exist; the final token may name a new object member.
pub fn insert_at(target: &mut Value, pointer: &str, value: Value) -> Result<(), ClientError> {
    let bad = || ClientError::BadSlot(pointer.to_string());
    if pointer.is_empty() {
        *target = value;
        return Ok(());
    }
    let (parent, last) = pointer.rsplit_once('/').ok_or_else(bad)?;
    let last = last.replace("~1", "/").replace("~0", "~");
    match target.pointer_mut(parent).ok_or_else(bad)? {
        Value::Object(map) => {
            map.insert(last, value);
            Ok(())
        }
        Value::Array(items) => {
            let slot = last.parse::<usize>().ok().and_then(|i| items.get_mut(i)).ok_or_else(bad)?;
            *slot = value;
            Ok(())
        }
        _ => Err(bad()),
    }
}

fn read_json(response: Response) -> Result<Value, ClientError> {
    let status = response.status().as_u16();
    let text = response.text().map_err(|e| ClientError::Unexpected { status, body: e.to_string() })?;
    serde_json::from_str(&text).map_err(|_| ClientError::Unexpected { status, body: text })
}

fn detail_of(response: Response) -> String {
    let status = response.status().as_u16();
    match read_json(response) {
        Ok(body) => match body.get("detail") {
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => body.to_string(),
        },
        Err(_) => format!("HTTP {status}"),
    }
}

fn error_from(response: Response) -> ClientError {
    let status = response.status();
    let code = status.as_u16();
    match status {
        StatusCode::UNPROCESSABLE_ENTITY => {
            let body = read_json(response).unwrap_or(Value::Null);
            match serde_json::from_value::<Vec<ValidationIssue>>(body["detail"].clone()) {
                Ok(issues) => ClientError::ValidationRejected(issues),
                Err(_) => ClientError::Unexpected { status: code, body: body.to_string() },
            }
        }
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
            ClientError::AuthRejected { status: code, detail: detail_of(response) }
        }
        StatusCode::NOT_FOUND => ClientError::NotFound(detail_of(response)),
        StatusCode::SERVICE_UNAVAILABLE | StatusCode::BAD_GATEWAY | StatusCode::GATEWAY_TIMEOUT => {
            ClientError::ServiceUnavailable(detail_of(response))
        }
        _ => ClientError::Unexpected { status: code, body: detail_of(response) },
    }
}
