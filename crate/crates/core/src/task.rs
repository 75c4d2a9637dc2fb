//! Task identity and lifecycle.
//!
//! A task is created by an API process when a valid `POST` arrives, travels
//! to a worker as a [`TaskEnvelope`] and finishes as a [`TaskOutcome`]. Its
//! observable state is a [`TaskStatus`], which only ever moves forward:
//!
//! ```text
//! queued ──▶ running ──▶ ready
//!    └───────────────────▲
//! ```
//!
//! Failure is deliberately not a status. A failed computation is still
//! `ready`; the HTTP status of the result endpoint tells success from failure.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use crate::time;

/// Identifier of one task, rendered as lowercase hyphenated UUID text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(Uuid);

impl TaskId {
    /// A fresh random (v4) identifier.
    pub fn new() -> Self {
        TaskId(Uuid::new_v4())
    }

    pub fn as_uuid(&self) -> &Uuid {
        &self.0
    }
}

impl Default for TaskId {
    fn default() -> Self {
        Self::new()
    }
}

impl From<Uuid> for TaskId {
    fn from(value: Uuid) -> Self {
        TaskId(value)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.hyphenated().fmt(f)
    }
}

/// Only the canonical 36 character hyphenated form is accepted, so that
/// `parse(render(id))` and `render(parse(text))` are both identities.
impl FromStr for TaskId {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let canonical = s.len() == 36 && !s.bytes().any(|b| b.is_ascii_uppercase());
        match Uuid::try_parse(s) {
            Ok(id) if canonical => Ok(TaskId(id)),
            _ => Err(ParseError::TaskId(s.to_owned())),
        }
    }
}

/// Shorthand for [`TaskId::new`].
pub fn new_task_id() -> TaskId {
    TaskId::new()
}

/// Observable lifecycle state of a task.
///
/// On the wire a status is the object `{"status": "queued"}`; use
/// [`TaskStatus::as_str`] for the bare token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskStatus {
    Queued,
    Running,
    Ready,
}

impl TaskStatus {
    pub const ALL: [TaskStatus; 3] = [TaskStatus::Queued, TaskStatus::Running, TaskStatus::Ready];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskStatus::Queued => "queued",
            TaskStatus::Running => "running",
            TaskStatus::Ready => "ready",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskStatus::Ready)
    }

    fn rank(&self) -> u8 {
        match self {
            TaskStatus::Queued => 0,
            TaskStatus::Running => 1,
            TaskStatus::Ready => 2,
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskStatus {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "queued" => Ok(TaskStatus::Queued),
            "running" => Ok(TaskStatus::Running),
            "ready" => Ok(TaskStatus::Ready),
            other => Err(ParseError::Status(other.to_owned())),
        }
    }
}

impl Serialize for TaskStatus {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        map.serialize_entry("status", self.as_str())?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for TaskStatus {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Wire {
            status: String,
        }
        let wire = Wire::deserialize(deserializer)?;
        wire.status.parse().map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal status transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: TaskStatus,
    pub to: TaskStatus,
}

/// Checks a status change. Forward moves (including `queued -> ready`, for
/// workers that finish before anyone observed `running`) and no-op moves are
/// legal; anything backward is not.
pub fn apply_transition(current: TaskStatus, next: TaskStatus) -> Result<TaskStatus, IllegalTransition> {
    if next.rank() >= current.rank() {
        Ok(next)
    } else {
        Err(IllegalTransition { from: current, to: next })
    }
}

/// Which endpoint family a task belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointKind {
    Request,
    FitParameters,
}

impl EndpointKind {
    pub const ALL: [EndpointKind; 2] = [EndpointKind::Request, EndpointKind::FitParameters];

    /// The URL path segment, e.g. `fit-parameters`.
    pub fn as_str(&self) -> &'static str {
        match self {
            EndpointKind::Request => "request",
            EndpointKind::FitParameters => "fit-parameters",
        }
    }
}

impl fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EndpointKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "request" => Ok(EndpointKind::Request),
            "fit-parameters" => Ok(EndpointKind::FitParameters),
            other => Err(ParseError::Kind(other.to_owned())),
        }
    }
}

/// A service version such as `v1`. Ordered by the numeric suffix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VersionTag {
    tag: String,
    number: u64,
}

impl VersionTag {
    pub fn new(tag: impl Into<String>) -> Result<Self, ParseError> {
        let tag = tag.into();
        let digits = tag.strip_prefix('v').unwrap_or("");
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ParseError::Version(tag));
        }
        let number = digits.parse().map_err(|_| ParseError::Version(tag.clone()))?;
        Ok(VersionTag { tag, number })
    }

    pub fn as_str(&self) -> &str {
        &self.tag
    }

    pub fn number(&self) -> u64 {
        self.number
    }
}

impl PartialOrd for VersionTag {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for VersionTag {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // "v1" and "v01" share a number; fall back to the text to stay total.
        self.number.cmp(&other.number).then_with(|| self.tag.cmp(&other.tag))
    }
}

impl fmt::Display for VersionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag)
    }
}

impl FromStr for VersionTag {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VersionTag::new(s)
    }
}

impl TryFrom<String> for VersionTag {
    type Error = ParseError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        VersionTag::new(value)
    }
}

impl From<VersionTag> for String {
    fn from(value: VersionTag) -> Self {
        value.tag
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("not a canonical task id: {0:?}")]
    TaskId(String),
    #[error("not a task status: {0:?}")]
    Status(String),
    #[error("not an endpoint kind: {0:?}")]
    Kind(String),
    #[error("not a version tag (expected v<digits>): {0:?}")]
    Version(String),
}

/// Everything a worker needs to compute a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub task_id: TaskId,
    pub kind: EndpointKind,
    pub version: VersionTag,
    pub input_payload: Value,
    #[serde(with = "time::rfc3339")]
    pub created_at: DateTime<Utc>,
    /// Zero on first delivery, incremented once per redelivery.
    pub attempt: u32,
}

impl TaskEnvelope {
    pub fn new(kind: EndpointKind, version: VersionTag, input_payload: Value) -> Self {
        TaskEnvelope {
            task_id: TaskId::new(),
            kind,
            version,
            input_payload,
            created_at: time::now(),
            attempt: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Success,
    Failure,
}

/// Final result of a task. Exactly one of `result_payload` and
/// `error_detail` is present, matching the verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OutcomeWire", into = "OutcomeWire")]
pub struct TaskOutcome {
    task_id: TaskId,
    verdict: Verdict,
    result_payload: Option<Value>,
    error_detail: Option<String>,
    finished_at: DateTime<Utc>,
    first_fetched_at: Option<DateTime<Utc>>,
}

impl TaskOutcome {
    pub fn success(task_id: TaskId, result_payload: Value, finished_at: DateTime<Utc>) -> Self {
        TaskOutcome {
            task_id,
            verdict: Verdict::Success,
            result_payload: Some(result_payload),
            error_detail: None,
            finished_at,
            first_fetched_at: None,
        }
    }

    pub fn failure(task_id: TaskId, error_detail: impl Into<String>, finished_at: DateTime<Utc>) -> Self {
        TaskOutcome {
            task_id,
            verdict: Verdict::Failure,
            result_payload: None,
            error_detail: Some(error_detail.into()),
            finished_at,
            first_fetched_at: None,
        }
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn result_payload(&self) -> Option<&Value> {
        self.result_payload.as_ref()
    }

    pub fn error_detail(&self) -> Option<&str> {
        self.error_detail.as_deref()
    }

    pub fn finished_at(&self) -> DateTime<Utc> {
        self.finished_at
    }

    pub fn first_fetched_at(&self) -> Option<DateTime<Utc>> {
        self.first_fetched_at
    }

    /// Records the first fetch. Later calls leave the stored time untouched.
    pub fn mark_fetched(&mut self, at: DateTime<Utc>) -> DateTime<Utc> {
        *self.first_fetched_at.get_or_insert(at)
    }
}

#[derive(Serialize, Deserialize)]
struct OutcomeWire {
    task_id: TaskId,
    verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result_payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_detail: Option<String>,
    #[serde(with = "time::rfc3339")]
    finished_at: DateTime<Utc>,
    #[serde(default, with = "time::rfc3339_opt", skip_serializing_if = "Option::is_none")]
    first_fetched_at: Option<DateTime<Utc>>,
}

impl TryFrom<OutcomeWire> for TaskOutcome {
    type Error = String;

    fn try_from(w: OutcomeWire) -> Result<Self, Self::Error> {
        match (w.verdict, &w.result_payload, &w.error_detail) {
            (Verdict::Success, Some(_), None) | (Verdict::Failure, None, Some(_)) => Ok(TaskOutcome {
                task_id: w.task_id,
                verdict: w.verdict,
                result_payload: w.result_payload,
                error_detail: w.error_detail,
                finished_at: w.finished_at,
                first_fetched_at: w.first_fetched_at,
            }),
            _ => Err("outcome must carry result_payload on success and error_detail on failure".into()),
        }
    }
}

impl From<TaskOutcome> for OutcomeWire {
    fn from(o: TaskOutcome) -> Self {
        OutcomeWire {
            task_id: o.task_id,
            verdict: o.verdict,
            result_payload: o.result_payload,
            error_detail: o.error_detail,
            finished_at: o.finished_at,
            first_fetched_at: o.first_fetched_at,
        }
    }
}
