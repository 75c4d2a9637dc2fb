use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use esg_core::{apply_transition, EndpointKind, TaskEnvelope, TaskId, TaskOutcome, TaskStatus, VersionTag};

use crate::{Broker, BrokerError, BrokerResult, ClaimLease, Fetch, TaskSummary};

struct Record {
    envelope: TaskEnvelope,
    status: TaskStatus,
    outcome: Option<TaskOutcome>,
    first_fetched_at: Option<DateTime<Utc>>,
    claim: Option<ClaimLease>,
}

#[derive(Default)]
struct State {
    tasks: HashMap<TaskId, Record>,
    queues: HashMap<(VersionTag, EndpointKind), VecDeque<TaskId>>,
}

struct Inner {
    state: Mutex<State>,
    arrived: Condvar,
    available: AtomicBool,
}

/// In-process broker. Clones share state, so one instance can serve any
/// number of API, worker and GC loops inside a process.
#[derive(Clone)]
pub struct MemoryBroker {
    inner: Arc<Inner>,
}

impl Default for MemoryBroker {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryBroker {
    pub fn new() -> Self {
        MemoryBroker {
            inner: Arc::new(Inner {
                state: Mutex::new(State::default()),
                arrived: Condvar::new(),
                available: AtomicBool::new(true),
            }),
        }
    }

    /// Fault injection: while unavailable every call fails with
    /// [`BrokerError::Unavailable`].
    pub fn set_available(&self, available: bool) {
        self.inner.available.store(available, Ordering::SeqCst);
        self.inner.arrived.notify_all();
    }

    fn lock(&self) -> BrokerResult<MutexGuard<'_, State>> {
        if !self.inner.available.load(Ordering::SeqCst) {
            return Err(BrokerError::Unavailable("in-process broker switched off".into()));
        }
        Ok(self.inner.state.lock().unwrap_or_else(|p| p.into_inner()))
    }
}

fn record(state: &mut State, id: TaskId) -> BrokerResult<&mut Record> {
    state.tasks.get_mut(&id).ok_or(BrokerError::UnknownTask(id))
}

impl Broker for MemoryBroker {
    fn enqueue(&self, envelope: &TaskEnvelope) -> BrokerResult<()> {
        let mut state = self.lock()?;
        if state.tasks.contains_key(&envelope.task_id) {
            return Err(BrokerError::DuplicateTask(envelope.task_id));
        }
        state.tasks.insert(
            envelope.task_id,
            Record {
                envelope: envelope.clone(),
                status: TaskStatus::Queued,
                outcome: None,
                first_fetched_at: None,
                claim: None,
            },
        );
        state.queues.entry((envelope.version.clone(), envelope.kind)).or_default().push_back(envelope.task_id);
        drop(state);
        self.inner.arrived.notify_all();
        Ok(())
    }

    fn claim(
        &self,
        version: &VersionTag,
        kind: EndpointKind,
        worker_id: &str,
        visibility: Duration,
        wait: Duration,
    ) -> BrokerResult<Option<TaskEnvelope>> {
        let until = Instant::now() + wait;
        let mut state = self.lock()?;
        let key = (version.clone(), kind);
        loop {
            let state_ref = &mut *state;
            while let Some(id) = state_ref.queues.get_mut(&key).and_then(VecDeque::pop_front) {
                // Deleted or already finished entries are dropped.
                let Some(rec) = state_ref.tasks.get_mut(&id) else { continue };
                if rec.outcome.is_some() {
                    continue;
                }
                rec.claim = Some(ClaimLease::new(worker_id, visibility));
                rec.status = TaskStatus::Running;
                return Ok(Some(rec.envelope.clone()));
            }
            let now = Instant::now();
            if now >= until {
                return Ok(None);
            }
            state = self.inner.arrived.wait_timeout(state, until - now).unwrap_or_else(|p| p.into_inner()).0;
            if !self.inner.available.load(Ordering::SeqCst) {
                return Err(BrokerError::Unavailable("in-process broker switched off".into()));
            }
        }
    }

    fn renew_lease(&self, task_id: TaskId, worker_id: &str, visibility: Duration) -> BrokerResult<()> {
        let mut state = self.lock()?;
        let rec = record(&mut state, task_id)?;
        match &mut rec.claim {
            Some(lease) if lease.worker_id == worker_id && rec.outcome.is_none() => {
                lease.visibility_deadline = crate::deadline(esg_core::time::now(), visibility);
                Ok(())
            }
            _ => Err(BrokerError::LeaseLost(task_id)),
        }
    }

    fn reap_expired_claims(&self, now: DateTime<Utc>) -> BrokerResult<usize> {
        let mut state = self.lock()?;
        let State { tasks, queues } = &mut *state;
        let mut expired: Vec<&mut Record> = tasks
            .values_mut()
            .filter(|r| r.outcome.is_none() && r.claim.as_ref().is_some_and(|c| c.visibility_deadline < now))
            .collect();
        expired.sort_by_key(|r| r.claim.as_ref().map(|c| c.visibility_deadline));
        let count = expired.len();
        for rec in expired {
            rec.claim = None;
            rec.status = TaskStatus::Queued;
            rec.envelope.attempt += 1;
            queues.entry((rec.envelope.version.clone(), rec.envelope.kind)).or_default().push_back(rec.envelope.task_id);
        }
        drop(state);
        if count > 0 {
            self.inner.arrived.notify_all();
        }
        Ok(count)
    }

    fn set_status(&self, task_id: TaskId, status: TaskStatus) -> BrokerResult<()> {
        let mut state = self.lock()?;
        let rec = record(&mut state, task_id)?;
        rec.status = apply_transition(rec.status, status)?;
        Ok(())
    }

    fn get_status(&self, task_id: TaskId) -> BrokerResult<TaskStatus> {
        let mut state = self.lock()?;
        Ok(record(&mut state, task_id)?.status)
    }

    fn put_outcome(&self, outcome: &TaskOutcome) -> BrokerResult<()> {
        let mut state = self.lock()?;
        let id = outcome.task_id();
        let rec = record(&mut state, id)?;
        if rec.outcome.is_some() {
            return Err(BrokerError::OutcomeAlreadySet(id));
        }
        rec.outcome = Some(outcome.clone());
        rec.status = TaskStatus::Ready;
        rec.claim = None;
        Ok(())
    }

    fn fetch_outcome(&self, task_id: TaskId, now: DateTime<Utc>) -> BrokerResult<Fetch> {
        let mut state = self.lock()?;
        let rec = record(&mut state, task_id)?;
        let Some(outcome) = &rec.outcome else { return Ok(Fetch::NotReady) };
        let mut outcome = outcome.clone();
        let first = *rec.first_fetched_at.get_or_insert(now);
        outcome.mark_fetched(first);
        Ok(Fetch::Ready(outcome))
    }

    fn delete_task(&self, task_id: TaskId) -> BrokerResult<()> {
        // Queue entries of deleted tasks are skipped by `claim`.
        self.lock()?.tasks.remove(&task_id);
        Ok(())
    }

    fn scan_tasks(&self) -> BrokerResult<Vec<TaskSummary>> {
        let state = self.lock()?;
        Ok(state
            .tasks
            .values()
            .map(|r| TaskSummary {
                task_id: r.envelope.task_id,
                created_at: r.envelope.created_at,
                first_fetched_at: r.first_fetched_at,
                has_outcome: r.outcome.is_some(),
            })
            .collect())
    }

    fn key_count(&self) -> BrokerResult<usize> {
        // Mirrors the key layout of the networked backend.
        let state = self.lock()?;
        let per_task: usize =
            state.tasks.values().map(|r| 3 + usize::from(r.outcome.is_some()) + usize::from(r.claim.is_some())).sum();
        let queues = state.queues.values().filter(|q| !q.is_empty()).count();
        let processing = usize::from(state.tasks.values().any(|r| r.claim.is_some()));
        let index = usize::from(!state.tasks.is_empty());
        Ok(per_task + queues + processing + index)
    }
}
