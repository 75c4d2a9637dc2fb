//! Queue and state fabric shared by API, worker and garbage collector
//! processes.
//!
//! [`Broker`] is the contract. [`MemoryBroker`] keeps everything in process
//! memory; [`RespBroker`] talks RESP2 to an external key-value store (or to
//! the embedded [`resp::StoreServer`]).
//!
//! Delivery is at least once. Outcomes are write-once, so a redelivered task
//! that finishes twice stores only the first outcome.

use std::time::Duration;

use chrono::{DateTime, Utc};
use esg_core::{EndpointKind, IllegalTransition, TaskEnvelope, TaskId, TaskOutcome, TaskStatus, VersionTag};

mod memory;
pub mod resp;
mod resp_broker;
#[cfg(feature = "testing")]
pub mod testing;

pub use memory::MemoryBroker;
pub use resp_broker::RespBroker;

/// Lease length used when a worker does not configure one.
pub const DEFAULT_VISIBILITY: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("task {0} already exists")]
    DuplicateTask(TaskId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error("task {0} already has an outcome")]
    OutcomeAlreadySet(TaskId),
    #[error("lease on task {0} is no longer held by this worker")]
    LeaseLost(TaskId),
    #[error("broker unavailable: {0}")]
    Unavailable(String),
    #[error("broker data corrupt: {0}")]
    Corrupt(String),
}

impl BrokerError {
    /// Whether retrying the same call may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, BrokerError::Unavailable(_))
    }
}

pub type BrokerResult<T> = Result<T, BrokerError>;

/// A worker's hold on a claimed task.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClaimLease {
    pub worker_id: String,
    #[serde(with = "esg_core::time::rfc3339")]
    pub claimed_at: DateTime<Utc>,
    #[serde(with = "esg_core::time::rfc3339")]
    pub visibility_deadline: DateTime<Utc>,
}

impl ClaimLease {
    fn new(worker_id: &str, visibility: Duration) -> Self {
        let claimed_at = esg_core::time::now();
        ClaimLease { worker_id: worker_id.to_owned(), claimed_at, visibility_deadline: deadline(claimed_at, visibility) }
    }
}

fn deadline(from: DateTime<Utc>, visibility: Duration) -> DateTime<Utc> {
    // Sub-millisecond leases would make `visibility_deadline > claimed_at`
    // fail after truncation.
    let span = chrono::Duration::from_std(visibility.max(Duration::from_millis(1))).unwrap_or(chrono::Duration::MAX);
    from.checked_add_signed(span).unwrap_or(DateTime::<Utc>::MAX_UTC)
}

/// Result of [`Broker::fetch_outcome`].
#[derive(Debug, Clone, PartialEq)]
pub enum Fetch {
    Ready(TaskOutcome),
    NotReady,
}

/// Garbage collector view of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSummary {
    pub task_id: TaskId,
    pub created_at: DateTime<Utc>,
    pub first_fetched_at: Option<DateTime<Utc>>,
    pub has_outcome: bool,
}

/// The broker contract. Implementations are shared between threads and,
/// for networked backends, between processes.
pub trait Broker: Send + Sync {
    /// Stores the envelope, sets status queued and appends the task to its
    /// `(version, kind)` queue.
    fn enqueue(&self, envelope: &TaskEnvelope) -> BrokerResult<()>;

    /// Takes the oldest queued task of `(version, kind)`, leases it to
    /// `worker_id` for `visibility` and marks it running. Waits up to `wait`
    /// for a task to arrive.
    fn claim(
        &self,
        version: &VersionTag,
        kind: EndpointKind,
        worker_id: &str,
        visibility: Duration,
        wait: Duration,
    ) -> BrokerResult<Option<TaskEnvelope>>;

    /// Pushes the lease deadline to `now + visibility`. Fails with
    /// `LeaseLost` if the lease was reaped, completed or taken over.
    fn renew_lease(&self, task_id: TaskId, worker_id: &str, visibility: Duration) -> BrokerResult<()>;

    /// Re-queues every leased task without outcome whose deadline is before
    /// `now`, incrementing its attempt counter.
    fn reap_expired_claims(&self, now: DateTime<Utc>) -> BrokerResult<usize>;

    fn set_status(&self, task_id: TaskId, status: TaskStatus) -> BrokerResult<()>;

    fn get_status(&self, task_id: TaskId) -> BrokerResult<TaskStatus>;

    /// Stores the outcome once; the task becomes ready.
    fn put_outcome(&self, outcome: &TaskOutcome) -> BrokerResult<()>;

    /// Returns the outcome without removing it. The first successful fetch
    /// records `now` as `first_fetched_at`.
    fn fetch_outcome(&self, task_id: TaskId, now: DateTime<Utc>) -> BrokerResult<Fetch>;

    /// Removes every trace of the task. Deleting a missing task succeeds.
    fn delete_task(&self, task_id: TaskId) -> BrokerResult<()>;

    /// Metadata of all live tasks. Tasks enqueued concurrently may be missed.
    fn scan_tasks(&self) -> BrokerResult<Vec<TaskSummary>>;

    /// Number of backend keys in use, for capacity monitoring.
    fn key_count(&self) -> BrokerResult<usize>;
}

/// Key names for one namespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyLayout {
    namespace: String,
}

impl KeyLayout {
    pub fn new(namespace: impl Into<String>) -> Self {
        KeyLayout { namespace: namespace.into() }
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn queue(&self, version: &VersionTag, kind: EndpointKind) -> String {
        format!("{}:{}:{}:queue", self.namespace, version, kind.as_str())
    }

    pub fn envelope(&self, id: TaskId) -> String {
        self.task_key(id, "envelope")
    }

    pub fn status(&self, id: TaskId) -> String {
        self.task_key(id, "status")
    }

    pub fn outcome(&self, id: TaskId) -> String {
        self.task_key(id, "outcome")
    }

    pub fn meta(&self, id: TaskId) -> String {
        self.task_key(id, "meta")
    }

    pub fn claim(&self, id: TaskId) -> String {
        self.task_key(id, "claim")
    }

    /// All keys of one task; the envelope comes last so that deleting in
    /// this order never exposes a half-deleted task.
    pub fn task_keys(&self, id: TaskId) -> [String; 5] {
        [self.outcome(id), self.status(id), self.meta(id), self.claim(id), self.envelope(id)]
    }

    /// Ids of claimed tasks, scanned by the reaper.
    pub fn processing(&self) -> String {
        format!("{}:processing", self.namespace)
    }

    /// Ids of all live tasks, scanned by the garbage collector.
    pub fn index(&self) -> String {
        format!("{}:tasks", self.namespace)
    }

    fn task_key(&self, id: TaskId, part: &str) -> String {
        format!("{}:task:{}:{}", self.namespace, id, part)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_layout() {
        let keys = KeyLayout::new("pv-forecast");
        let id: TaskId = "0b4e2d3c-94a5-4bb8-9a41-7c1e2f9e6a10".parse().unwrap();
        let v1 = VersionTag::new("v1").unwrap();
        assert_eq!(keys.queue(&v1, EndpointKind::FitParameters), "pv-forecast:v1:fit-parameters:queue");
        assert_eq!(keys.envelope(id), "pv-forecast:task:0b4e2d3c-94a5-4bb8-9a41-7c1e2f9e6a10:envelope");
        let all = keys.task_keys(id);
        assert!(all.iter().all(|k| k.contains(&id.to_string())));
        assert!(all[4].ends_with(":envelope"));
    }

    #[test]
    fn lease_deadline_is_after_claim() {
        let lease = ClaimLease::new("w", Duration::from_nanos(1));
        assert!(lease.visibility_deadline > lease.claimed_at);
        assert!(deadline(lease.claimed_at, Duration::MAX) > lease.claimed_at);
    }
}
