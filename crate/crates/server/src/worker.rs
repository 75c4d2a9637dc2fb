//! The worker process: claims tasks, runs service code, stores outcomes.
//!
//! One task runs at a time per worker. While the handler computes, the
//! worker renews the task's lease every `heartbeat`, so tasks may run far
//! longer than the visibility timeout. A worker that dies stops renewing;
//! the lease expires and the task is redelivered.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use esg_broker::{Broker, BrokerError, DEFAULT_VISIBILITY};
use esg_core::{
    validate, Backoff, EndpointKind, HandlerError, Progress, RouteError, ServiceSpec, TaskEnvelope, TaskId,
    TaskOutcome, Verdict, VersionTag,
};
use serde_json::Value;

use crate::Shutdown;

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub worker_id: String,
    /// Queues to serve. Empty means every endpoint of every version.
    pub subscriptions: Vec<(VersionTag, EndpointKind)>,
    pub visibility: Duration,
    pub heartbeat: Duration,
    /// How long one poll cycle blocks waiting for work.
    pub poll_wait: Duration,
    /// Time granted to an in-flight task after shutdown is requested.
    pub grace: Duration,
    /// Handler runs longer than this end as failures.
    pub max_runtime: Option<Duration>,
    /// How often this worker re-queues expired leases of other workers.
    pub reap_interval: Duration,
    pub broker_retries: u32,
}

impl WorkerConfig {
    pub fn new(worker_id: impl Into<String>) -> Self {
        WorkerConfig {
            worker_id: worker_id.into(),
            subscriptions: vec![],
            visibility: DEFAULT_VISIBILITY,
            heartbeat: Duration::from_secs(60),
            poll_wait: Duration::from_secs(1),
            grace: Duration::from_secs(30),
            max_runtime: None,
            reap_interval: Duration::from_secs(30),
            broker_retries: 5,
        }
    }
}

/// What happened to one claimed task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskReport {
    /// The outcome was stored.
    Stored { task_id: TaskId, verdict: Verdict },
    /// Another delivery stored an outcome first, or the task was deleted.
    Discarded { task_id: TaskId },
    /// Shutdown grace ran out; the lease will expire and the task is
    /// redelivered.
    Abandoned { task_id: TaskId },
}

enum Finished {
    Value(Value),
    Failed(String),
    Abandoned,
}

pub struct Worker {
    spec: Arc<ServiceSpec>,
    broker: Arc<dyn Broker>,
    config: WorkerConfig,
}

impl Worker {
    pub fn new(spec: Arc<ServiceSpec>, broker: Arc<dyn Broker>, mut config: WorkerConfig) -> Result<Self, RouteError> {
        if config.subscriptions.is_empty() {
            config.subscriptions = spec
                .versions()
                .flat_map(|(tag, v)| EndpointKind::ALL.into_iter().filter(|k| v.endpoint(*k).is_some()).map(|k| (tag.clone(), k)))
                .collect();
        }
        for (version, kind) in &config.subscriptions {
            spec.endpoint(version.as_str(), *kind)?;
        }
        Ok(Worker { spec, broker, config })
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    /// Claims and executes tasks until `shutdown` fires.
    pub fn run(&self, shutdown: &Shutdown) {
        tracing::info!(worker_id = %self.config.worker_id, queues = self.config.subscriptions.len(), "worker started");
        let mut failures = 0u32;
        let mut last_reap: Option<Instant> = None;
        while !shutdown.is_triggered() {
            if last_reap.is_none_or(|t| t.elapsed() >= self.config.reap_interval) {
                last_reap = Some(Instant::now());
                match self.broker.reap_expired_claims(chrono::Utc::now()) {
                    Ok(0) => {}
                    Ok(n) => tracing::info!(requeued = n, "re-queued tasks with expired leases"),
                    Err(e) => tracing::warn!(error = %e, "reaping expired leases failed"),
                }
            }
            match self.poll_once(shutdown) {
                Ok(_) => failures = 0,
                Err(e) => {
                    let delay = Backoff::BROKER.delay(failures);
                    failures = failures.saturating_add(1);
                    tracing::warn!(error = %e, retry_in_ms = delay.as_millis() as u64, "broker call failed");
                    shutdown.wait_timeout(delay);
                }
            }
        }
        tracing::info!(worker_id = %self.config.worker_id, "worker stopped");
    }

    /// One poll cycle over all subscriptions. Returns the report of the
    /// task executed, if any.
    pub fn poll_once(&self, shutdown: &Shutdown) -> Result<Option<TaskReport>, BrokerError> {
        let n = self.config.subscriptions.len().max(1) as u32;
        let wait = self.config.poll_wait / n;
        for (version, kind) in &self.config.subscriptions {
            let claimed =
                self.broker.claim(version, *kind, &self.config.worker_id, self.config.visibility, wait)?;
            if let Some(envelope) = claimed {
                return Ok(Some(self.execute(envelope, shutdown)));
            }
            if shutdown.is_triggered() {
                break;
            }
        }
        Ok(None)
    }

    /// Runs one claimed task to an outcome (or abandons it on shutdown).
    pub fn execute(&self, envelope: TaskEnvelope, shutdown: &Shutdown) -> TaskReport {
        let started = Instant::now();
        let task_id = envelope.task_id;
        let endpoint = match self.spec.endpoint(envelope.version.as_str(), envelope.kind) {
            Ok(e) => e.clone(),
            Err(e) => return self.store(&envelope, Finished::Failed(e.to_string()), started),
        };
        let finished = match self.compute(&envelope, endpoint.handler.clone(), shutdown) {
            Finished::Value(value) => match validate(&endpoint.output, &value) {
                Ok(()) => Finished::Value(value),
                Err(errors) => {
                    tracing::error!(task_id = %task_id, errors = %errors, "handler output violates its schema");
                    Finished::Failed(format!("service produced invalid output: {errors}"))
                }
            },
            other => other,
        };
        self.store(&envelope, finished, started)
    }

    fn compute(&self, envelope: &TaskEnvelope, handler: Arc<dyn esg_core::Handler>, shutdown: &Shutdown) -> Finished {
        let task_id = envelope.task_id;
        let progress = {
            let (broker, worker_id, visibility) =
                (self.broker.clone(), self.config.worker_id.clone(), self.config.visibility);
            Progress::new(move || {
                if let Err(e) = broker.renew_lease(task_id, &worker_id, visibility) {
                    tracing::debug!(task_id = %task_id, error = %e, "progress renewal failed");
                }
            })
        };
        let (tx, rx) = mpsc::channel();
        let input = envelope.input_payload.clone();
        let spawned = std::thread::Builder::new().name(format!("task-{task_id}")).spawn(move || {
            let result = catch_unwind(AssertUnwindSafe(|| handler.handle(&input, &progress)));
            let _ = tx.send(result);
        });
        if let Err(e) = spawned {
            return Finished::Failed(format!("cannot start handler: {e}"));
        }

        let started = Instant::now();
        let mut next_beat = started + self.config.heartbeat;
        let mut grace_until: Option<Instant> = None;
        loop {
            let now = Instant::now();
            if grace_until.is_none() && shutdown.is_triggered() {
                grace_until = Some(now + self.config.grace);
            }
            if grace_until.is_some_and(|g| now >= g) {
                tracing::warn!(task_id = %task_id, "shutdown grace exceeded; abandoning task");
                return Finished::Abandoned;
            }
            if let Some(limit) = self.config.max_runtime {
                if now.duration_since(started) >= limit {
                    return Finished::Failed(format!("task exceeded the maximum runtime of {} s", limit.as_secs_f64()));
                }
            }
            if now >= next_beat {
                next_beat = now + self.config.heartbeat;
                match self.broker.renew_lease(task_id, &self.config.worker_id, self.config.visibility) {
                    Ok(()) => {}
                    Err(BrokerError::LeaseLost(_)) => {
                        tracing::warn!(task_id = %task_id, "lease lost; task may run twice")
                    }
                    Err(e) => tracing::warn!(task_id = %task_id, error = %e, "lease renewal failed"),
                }
            }
            let slice = next_beat
                .saturating_duration_since(now)
                .min(Duration::from_millis(50))
                .max(Duration::from_millis(1));
            match rx.recv_timeout(slice) {
                Ok(Ok(Ok(value))) => return Finished::Value(value),
                Ok(Ok(Err(HandlerError(message)))) => return Finished::Failed(message),
                Ok(Err(panic)) => {
                    let message = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "unknown panic".into());
                    return Finished::Failed(format!("service code crashed: {message}"));
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Finished::Failed("service code crashed".into()),
            }
        }
    }

    fn store(&self, envelope: &TaskEnvelope, finished: Finished, started: Instant) -> TaskReport {
        let task_id = envelope.task_id;
        let now = esg_core::time::now();
        let outcome = match finished {
            Finished::Value(v) => TaskOutcome::success(task_id, v, now),
            Finished::Failed(detail) => TaskOutcome::failure(task_id, detail, now),
            Finished::Abandoned => return TaskReport::Abandoned { task_id },
        };
        let verdict = outcome.verdict();
        let stored =
            Backoff::BROKER.retry(self.config.broker_retries, BrokerError::is_transient, || self.broker.put_outcome(&outcome));
        let duration_ms = started.elapsed().as_millis() as u64;
        let verdict_text = match verdict {
            Verdict::Success => "success",
            Verdict::Failure => "failure",
        };
        match stored {
            Ok(()) => {
                tracing::info!(task_id = %task_id, attempt = envelope.attempt, duration_ms, verdict = verdict_text, "task finished");
                TaskReport::Stored { task_id, verdict }
            }
            Err(BrokerError::OutcomeAlreadySet(_) | BrokerError::UnknownTask(_)) => {
                tracing::info!(task_id = %task_id, attempt = envelope.attempt, duration_ms, verdict = verdict_text, "duplicate delivery discarded");
                TaskReport::Discarded { task_id }
            }
            Err(e) => {
                // The lease will expire and another delivery will retry.
                tracing::error!(task_id = %task_id, attempt = envelope.attempt, error = %e, "storing outcome failed");
                TaskReport::Abandoned { task_id }
            }
        }
    }
}
