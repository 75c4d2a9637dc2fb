//! The garbage collector: deletes task data once it is unlikely to be
//! requested again.
//!
//! A task is deleted when its result was first fetched more than
//! `retain_after_fetch` ago, or when it was created more than
//! `absolute_ttl` ago. Deletion is hard; later polls get 404.

use std::time::Duration;

use chrono::{DateTime, Utc};
use esg_broker::{Broker, BrokerResult, TaskSummary};
use esg_core::TaskId;

use crate::Shutdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcPolicy {
    pub retain_after_fetch: Duration,
    /// `Duration::MAX` disables age-based deletion.
    pub absolute_ttl: Duration,
}

impl Default for GcPolicy {
    fn default() -> Self {
        GcPolicy { retain_after_fetch: Duration::from_secs(15 * 60), absolute_ttl: Duration::from_secs(48 * 3600) }
    }
}

impl GcPolicy {
    pub fn check(&self) -> Result<(), String> {
        if self.absolute_ttl <= self.retain_after_fetch {
            return Err(format!(
                "absolute_ttl ({} s) must exceed retain_after_fetch ({} s)",
                self.absolute_ttl.as_secs_f64(),
                self.retain_after_fetch.as_secs_f64()
            ));
        }
        Ok(())
    }

    pub fn is_expired(&self, task: &TaskSummary, now: DateTime<Utc>) -> bool {
        let older_than = |since: DateTime<Utc>, limit: Duration| match (now - since).to_std() {
            Ok(age) => age > limit,
            Err(_) => false,
        };
        task.first_fetched_at.is_some_and(|t| older_than(t, self.retain_after_fetch))
            || older_than(task.created_at, self.absolute_ttl)
    }
}

/// Deletes every expired task and returns the deleted ids.
pub fn sweep(broker: &dyn Broker, policy: &GcPolicy, now: DateTime<Utc>) -> BrokerResult<Vec<TaskId>> {
    let mut deleted = Vec::new();
    for task in broker.scan_tasks()? {
        if policy.is_expired(&task, now) {
            broker.delete_task(task.task_id)?;
            deleted.push(task.task_id);
        }
    }
    Ok(deleted)
}

/// Sweeps every `interval` until shutdown. Each cycle also re-queues
/// expired leases, so crashed workers' tasks recover even when no other
/// worker is polling.
pub fn run_gc(broker: &dyn Broker, policy: &GcPolicy, interval: Duration, shutdown: &Shutdown) {
    tracing::info!(
        retain_after_fetch_s = policy.retain_after_fetch.as_secs_f64(),
        absolute_ttl_s = policy.absolute_ttl.as_secs_f64(),
        interval_s = interval.as_secs_f64(),
        "garbage collector started"
    );
    loop {
        let now = Utc::now();
        let requeued = broker.reap_expired_claims(now);
        match sweep(broker, policy, now) {
            Ok(deleted) => tracing::info!(
                deleted = deleted.len(),
                requeued = requeued.as_ref().copied().unwrap_or(0),
                "sweep finished"
            ),
            Err(e) => tracing::warn!(error = %e, "sweep skipped; retrying next cycle"),
        }
        if shutdown.wait_timeout(interval) {
            break;
        }
    }
    tracing::info!("garbage collector stopped");
}

#[cfg(test)]
mod tests {
    use esg_broker::{BrokerError, MemoryBroker};
    use esg_core::{EndpointKind, TaskEnvelope, TaskOutcome, VersionTag};
    use serde_json::json;

    use super::*;

    fn policy() -> GcPolicy {
        GcPolicy { retain_after_fetch: Duration::from_secs(900), absolute_ttl: Duration::from_secs(48 * 3600) }
    }

    fn enqueue(broker: &MemoryBroker, created_at: DateTime<Utc>) -> TaskId {
        let mut e = TaskEnvelope::new(EndpointKind::Request, VersionTag::new("v1").unwrap(), json!({}));
        e.created_at = created_at;
        broker.enqueue(&e).unwrap();
        e.task_id
    }

    fn secs(n: i64) -> chrono::Duration {
        chrono::Duration::seconds(n)
    }

    #[test]
    fn fetched_tasks_expire_after_retention() {
        let broker = MemoryBroker::new();
        let t = esg_core::time::now();
        let id = enqueue(&broker, t);
        broker.put_outcome(&TaskOutcome::success(id, json!({}), t)).unwrap();
        broker.fetch_outcome(id, t).unwrap();
        assert!(sweep(&broker, &policy(), t + secs(900)).unwrap().is_empty());
        assert_eq!(sweep(&broker, &policy(), t + secs(901)).unwrap(), vec![id]);
        assert!(matches!(broker.get_status(id), Err(BrokerError::UnknownTask(_))));
    }

    #[test]
    fn unfetched_results_survive_until_ttl() {
        let broker = MemoryBroker::new();
        let t = esg_core::time::now();
        let id = enqueue(&broker, t);
        broker.put_outcome(&TaskOutcome::success(id, json!({}), t)).unwrap();
        assert!(sweep(&broker, &policy(), t + secs(47 * 3600)).unwrap().is_empty());
        assert_eq!(sweep(&broker, &policy(), t + secs(48 * 3600 + 1)).unwrap(), vec![id]);
    }

    #[test]
    fn orphaned_queued_task_is_deleted() {
        let broker = MemoryBroker::new();
        let now = esg_core::time::now();
        let orphan = enqueue(&broker, now - secs(49 * 3600));
        let young = enqueue(&broker, now);
        assert_eq!(sweep(&broker, &policy(), now).unwrap(), vec![orphan]);
        assert!(broker.get_status(young).is_ok());
    }

    #[test]
    fn infinite_ttl_and_policy_check() {
        let p = GcPolicy { retain_after_fetch: Duration::from_secs(1), absolute_ttl: Duration::MAX };
        p.check().unwrap();
        let task = TaskSummary {
            task_id: TaskId::new(),
            created_at: DateTime::<Utc>::MIN_UTC,
            first_fetched_at: None,
            has_outcome: true,
        };
        assert!(!p.is_expired(&task, Utc::now()));
        assert!(GcPolicy { retain_after_fetch: Duration::from_secs(5), absolute_ttl: Duration::from_secs(5) }.check().is_err());
    }

    #[test]
    fn concurrent_collectors_do_not_conflict() {
        let broker = MemoryBroker::new();
        let now = esg_core::time::now();
        let ids: Vec<TaskId> = (0..200).map(|_| enqueue(&broker, now - secs(49 * 3600))).collect();
        let runs: Vec<_> = (0..2)
            .map(|_| {
                let b = broker.clone();
                std::thread::spawn(move || sweep(&b, &policy(), now).unwrap().len())
            })
            .collect();
        let total: usize = runs.into_iter().map(|r| r.join().unwrap()).sum();
        assert!(total >= ids.len());
        assert!(broker.scan_tasks().unwrap().is_empty());
    }

    #[test]
    fn run_gc_stops_on_shutdown() {
        let broker = MemoryBroker::new();
        let id = enqueue(&broker, esg_core::time::now() - secs(49 * 3600));
        let stop = Shutdown::new();
        let handle = {
            let (b, stop) = (broker.clone(), stop.clone());
            std::thread::spawn(move || run_gc(&b, &policy(), Duration::from_millis(20), &stop))
        };
        std::thread::sleep(Duration::from_millis(100));
        stop.trigger();
        handle.join().unwrap();
        assert!(broker.get_status(id).is_err());
    }
}
