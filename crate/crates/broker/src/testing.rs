//! Backend-independent contract suite. Every [`Broker`] implementation must
//! pass every case in [`CASES`].

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use chrono::Utc;
use esg_core::{EndpointKind, TaskEnvelope, TaskId, TaskOutcome, TaskStatus, Verdict, VersionTag};
use serde_json::json;

use crate::resp::StoreServer;
use crate::{Broker, BrokerError, Fetch, MemoryBroker, RespBroker};

/// Produces empty backends for the suite.
pub trait Backend: Sync {
    fn name(&self) -> &str;

    /// Two independent handles onto one fresh, empty backend.
    fn fresh_pair(&self) -> (Arc<dyn Broker>, Arc<dyn Broker>);

    fn fresh(&self) -> Arc<dyn Broker> {
        self.fresh_pair().0
    }
}

pub struct MemoryBackend;

impl Backend for MemoryBackend {
    fn name(&self) -> &str {
        "in-process"
    }

    fn fresh_pair(&self) -> (Arc<dyn Broker>, Arc<dyn Broker>) {
        let broker = MemoryBroker::new();
        (Arc::new(broker.clone()), Arc::new(broker))
    }
}

/// Starts one embedded store per fresh backend and keeps it running for the
/// lifetime of this value.
#[derive(Default)]
pub struct RespBackend {
    servers: Mutex<Vec<StoreServer>>,
}

impl RespBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for RespBackend {
    fn name(&self) -> &str {
        "RESP"
    }

    fn fresh_pair(&self) -> (Arc<dyn Broker>, Arc<dyn Broker>) {
        let server = StoreServer::start("127.0.0.1:0", Some("contract".into())).expect("start store");
        let url = server.url(1);
        self.servers.lock().unwrap_or_else(|p| p.into_inner()).push(server);
        let a = RespBroker::connect(&url, "contract").expect("connect");
        let b = RespBroker::connect(&url, "contract").expect("connect");
        (Arc::new(a), Arc::new(b))
    }
}

pub type Case = fn(&dyn Backend);

/// Every contract case, by name.
pub const CASES: &[(&str, Case)] = &[
    ("enqueue_sets_queued", enqueue_sets_queued),
    ("duplicate_enqueue_is_rejected", duplicate_enqueue_is_rejected),
    ("claim_is_fifo_per_queue", claim_is_fifo_per_queue),
    ("queues_are_separate", queues_are_separate),
    ("empty_claim_returns_none", empty_claim_returns_none),
    ("claim_waits_for_enqueue", claim_waits_for_enqueue),
    ("claim_race", claim_race),
    ("visibility_expiry_redelivery", visibility_expiry_redelivery),
    ("reap_leaves_live_leases", reap_leaves_live_leases),
    ("reap_skips_completed_tasks", reap_skips_completed_tasks),
    ("renewed_lease_survives", renewed_lease_survives),
    ("renew_requires_the_lease", renew_requires_the_lease),
    ("status_transitions", status_transitions),
    ("unknown_task_errors", unknown_task_errors),
    ("outcome_is_write_once", outcome_is_write_once),
    ("fetch_is_repeatable", fetch_is_repeatable),
    ("failure_outcome_passes_through", failure_outcome_passes_through),
    ("delete_removes_everything", delete_removes_everything),
    ("claim_skips_deleted_and_finished", claim_skips_deleted_and_finished),
    ("scan_reports_metadata", scan_reports_metadata),
    ("cross_handle_visibility", cross_handle_visibility),
    ("blocking_claim_does_not_starve", blocking_claim_does_not_starve),
    ("at_least_once_under_crashes", at_least_once_under_crashes),
];

/// Runs every case, catching panics. Returns `(name, failure message)`.
pub fn run_all(backend: &dyn Backend) -> Vec<(&'static str, Result<(), String>)> {
    CASES
        .iter()
        .map(|(name, case)| {
            let result = catch_unwind(AssertUnwindSafe(|| case(backend))).map_err(|panic| {
                panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into())
            });
            (*name, result)
        })
        .collect()
}

const NO_WAIT: Duration = Duration::ZERO;
const LONG: Duration = Duration::from_secs(600);

fn v1() -> VersionTag {
    VersionTag::new("v1").unwrap()
}

fn envelope(n: u64) -> TaskEnvelope {
    TaskEnvelope::new(EndpointKind::Request, v1(), json!({ "n": n }))
}

fn claim(b: &dyn Broker, worker: &str, visibility: Duration) -> Option<TaskEnvelope> {
    b.claim(&v1(), EndpointKind::Request, worker, visibility, NO_WAIT).unwrap()
}

fn success(id: TaskId) -> TaskOutcome {
    TaskOutcome::success(id, json!({ "done": id.to_string() }), esg_core::time::now())
}

pub fn enqueue_sets_queued(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Queued);
}

pub fn duplicate_enqueue_is_rejected(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    assert!(matches!(b.enqueue(&e), Err(BrokerError::DuplicateTask(id)) if id == e.task_id));
    claim(&*b, "w", LONG).unwrap();
    assert!(claim(&*b, "w", LONG).is_none(), "duplicate must not be queued twice");
}

pub fn claim_is_fifo_per_queue(backend: &dyn Backend) {
    let b = backend.fresh();
    let sent: Vec<TaskEnvelope> = (0..20).map(envelope).collect();
    for e in &sent {
        b.enqueue(e).unwrap();
    }
    let got: Vec<TaskId> = (0..20).map(|_| claim(&*b, "w", LONG).unwrap().task_id).collect();
    assert_eq!(got, sent.iter().map(|e| e.task_id).collect::<Vec<_>>());
}

pub fn queues_are_separate(backend: &dyn Backend) {
    let b = backend.fresh();
    let fit = TaskEnvelope::new(EndpointKind::FitParameters, v1(), json!({}));
    let v2 = TaskEnvelope::new(EndpointKind::Request, VersionTag::new("v2").unwrap(), json!({}));
    b.enqueue(&fit).unwrap();
    b.enqueue(&v2).unwrap();
    assert!(claim(&*b, "w", LONG).is_none());
    let got = b.claim(&v1(), EndpointKind::FitParameters, "w", LONG, NO_WAIT).unwrap().unwrap();
    assert_eq!(got, fit);
    let got = b.claim(&VersionTag::new("v2").unwrap(), EndpointKind::Request, "w", LONG, NO_WAIT).unwrap().unwrap();
    assert_eq!(got.task_id, v2.task_id);
    assert_eq!(b.get_status(got.task_id).unwrap(), TaskStatus::Running);
}

pub fn empty_claim_returns_none(backend: &dyn Backend) {
    let b = backend.fresh();
    assert!(claim(&*b, "w", LONG).is_none());
    let started = Instant::now();
    assert!(b.claim(&v1(), EndpointKind::Request, "w", LONG, Duration::from_millis(150)).unwrap().is_none());
    assert!(started.elapsed() >= Duration::from_millis(140), "returned after {:?}", started.elapsed());
}

pub fn claim_waits_for_enqueue(backend: &dyn Backend) {
    let (b, other) = backend.fresh_pair();
    let e = envelope(1);
    let sent = e.clone();
    let producer = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(150));
        other.enqueue(&sent).unwrap();
    });
    let started = Instant::now();
    let got = b.claim(&v1(), EndpointKind::Request, "w", LONG, Duration::from_secs(10)).unwrap();
    producer.join().unwrap();
    assert_eq!(got.map(|g| g.task_id), Some(e.task_id));
    assert!(started.elapsed() < Duration::from_secs(5));
}

/// Two claimers race for each of 1,000 single tasks; each task must be
/// delivered exactly once.
pub fn claim_race(backend: &dyn Backend) {
    const RACES: usize = 1000;
    let (a, b) = backend.fresh_pair();
    let start = Arc::new(Barrier::new(3));
    let done = Arc::new(Barrier::new(3));
    let deliveries = Arc::new(AtomicUsize::new(0));
    let claimers: Vec<_> = [a.clone(), b]
        .into_iter()
        .enumerate()
        .map(|(i, broker)| {
            let (start, done, deliveries) = (start.clone(), done.clone(), deliveries.clone());
            std::thread::spawn(move || {
                for _ in 0..RACES {
                    start.wait();
                    if claim(&*broker, &format!("w{i}"), LONG).is_some() {
                        deliveries.fetch_add(1, Ordering::SeqCst);
                    }
                    done.wait();
                }
            })
        })
        .collect();
    for round in 0..RACES {
        a.enqueue(&envelope(round as u64)).unwrap();
        start.wait();
        done.wait();
        assert_eq!(deliveries.load(Ordering::SeqCst), round + 1, "race {round}");
    }
    for c in claimers {
        c.join().unwrap();
    }
    assert_eq!(deliveries.load(Ordering::SeqCst), RACES);
}

pub fn visibility_expiry_redelivery(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    let first = claim(&*b, "w1", Duration::from_millis(50)).unwrap();
    assert_eq!(first.attempt, 0);
    assert!(claim(&*b, "w2", LONG).is_none(), "leased task must not be handed out again");
    std::thread::sleep(Duration::from_millis(120));
    assert_eq!(b.reap_expired_claims(Utc::now()).unwrap(), 1);
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Queued);
    let second = claim(&*b, "w2", LONG).unwrap();
    assert_eq!(second.task_id, e.task_id);
    assert_eq!(second.attempt, 1);
    assert_eq!(second.input_payload, e.input_payload);
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Running);
    assert!(matches!(b.renew_lease(e.task_id, "w1", LONG), Err(BrokerError::LeaseLost(_))));
    b.renew_lease(e.task_id, "w2", LONG).unwrap();
}

pub fn reap_leaves_live_leases(backend: &dyn Backend) {
    let b = backend.fresh();
    assert_eq!(b.reap_expired_claims(Utc::now()).unwrap(), 0);
    let (short, long) = (envelope(1), envelope(2));
    b.enqueue(&short).unwrap();
    b.enqueue(&long).unwrap();
    claim(&*b, "w", Duration::from_millis(30)).unwrap();
    claim(&*b, "w", LONG).unwrap();
    std::thread::sleep(Duration::from_millis(80));
    assert_eq!(b.reap_expired_claims(Utc::now()).unwrap(), 1);
    assert_eq!(b.get_status(short.task_id).unwrap(), TaskStatus::Queued);
    assert_eq!(b.get_status(long.task_id).unwrap(), TaskStatus::Running);
    b.renew_lease(long.task_id, "w", LONG).unwrap();
    assert_eq!(claim(&*b, "w", LONG).unwrap().task_id, short.task_id);
    assert_eq!(b.reap_expired_claims(Utc::now()).unwrap(), 0);
}

pub fn reap_skips_completed_tasks(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    claim(&*b, "w", Duration::from_millis(20)).unwrap();
    b.put_outcome(&success(e.task_id)).unwrap();
    std::thread::sleep(Duration::from_millis(60));
    assert_eq!(b.reap_expired_claims(Utc::now()).unwrap(), 0);
    assert!(claim(&*b, "w", LONG).is_none());
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Ready);
}

pub fn renewed_lease_survives(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    claim(&*b, "w", Duration::from_millis(100)).unwrap();
    for _ in 0..5 {
        std::thread::sleep(Duration::from_millis(40));
        b.renew_lease(e.task_id, "w", Duration::from_millis(100)).unwrap();
        assert_eq!(b.reap_expired_claims(Utc::now()).unwrap(), 0);
    }
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Running);
}

pub fn renew_requires_the_lease(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    assert!(matches!(b.renew_lease(e.task_id, "w", LONG), Err(BrokerError::LeaseLost(_))));
    claim(&*b, "w", LONG).unwrap();
    assert!(matches!(b.renew_lease(e.task_id, "intruder", LONG), Err(BrokerError::LeaseLost(_))));
    b.put_outcome(&success(e.task_id)).unwrap();
    assert!(matches!(b.renew_lease(e.task_id, "w", LONG), Err(BrokerError::LeaseLost(_))));
}

pub fn status_transitions(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    b.set_status(e.task_id, TaskStatus::Running).unwrap();
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Running);
    b.set_status(e.task_id, TaskStatus::Ready).unwrap();
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Ready);
    let err = b.set_status(e.task_id, TaskStatus::Running).unwrap_err();
    assert!(matches!(err, BrokerError::IllegalTransition(_)), "{err:?}");
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Ready);

    let skip = envelope(2);
    b.enqueue(&skip).unwrap();
    b.set_status(skip.task_id, TaskStatus::Ready).unwrap();
    assert!(matches!(b.set_status(skip.task_id, TaskStatus::Queued), Err(BrokerError::IllegalTransition(_))));
}

pub fn unknown_task_errors(backend: &dyn Backend) {
    let b = backend.fresh();
    let id = TaskId::new();
    let unknown = |r: Result<(), BrokerError>| matches!(r, Err(BrokerError::UnknownTask(x)) if x == id);
    assert!(unknown(b.get_status(id).map(|_| ())));
    assert!(unknown(b.set_status(id, TaskStatus::Running)));
    assert!(unknown(b.put_outcome(&success(id))));
    assert!(unknown(b.fetch_outcome(id, Utc::now()).map(|_| ())));
    b.delete_task(id).unwrap();
}

pub fn outcome_is_write_once(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    claim(&*b, "w", LONG).unwrap();
    let first = success(e.task_id);
    b.put_outcome(&first).unwrap();
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Ready);
    let second = TaskOutcome::failure(e.task_id, "late duplicate", esg_core::time::now());
    assert!(matches!(b.put_outcome(&second), Err(BrokerError::OutcomeAlreadySet(_))));
    let Fetch::Ready(stored) = b.fetch_outcome(e.task_id, Utc::now()).unwrap() else { panic!("not ready") };
    assert_eq!(stored.result_payload(), first.result_payload());
}

pub fn fetch_is_repeatable(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    assert_eq!(b.fetch_outcome(e.task_id, Utc::now()).unwrap(), Fetch::NotReady);
    let outcome = success(e.task_id);
    b.put_outcome(&outcome).unwrap();
    let t1 = esg_core::time::now();
    let Fetch::Ready(first) = b.fetch_outcome(e.task_id, t1).unwrap() else { panic!("not ready") };
    let t2 = t1 + chrono::Duration::seconds(5);
    let Fetch::Ready(second) = b.fetch_outcome(e.task_id, t2).unwrap() else { panic!("not ready") };
    assert_eq!(first, second);
    assert_eq!(first.first_fetched_at(), Some(t1));
    assert_eq!(first.result_payload(), outcome.result_payload());
    let summary = b.scan_tasks().unwrap().into_iter().find(|s| s.task_id == e.task_id).unwrap();
    assert_eq!(summary.first_fetched_at, Some(t1));
}

pub fn failure_outcome_passes_through(backend: &dyn Backend) {
    let b = backend.fresh();
    let e = envelope(1);
    b.enqueue(&e).unwrap();
    b.put_outcome(&TaskOutcome::failure(e.task_id, "bad geometry", esg_core::time::now())).unwrap();
    let Fetch::Ready(got) = b.fetch_outcome(e.task_id, Utc::now()).unwrap() else { panic!("not ready") };
    assert_eq!(got.verdict(), Verdict::Failure);
    assert_eq!(got.error_detail(), Some("bad geometry"));
    assert_eq!(got.result_payload(), None);
}

pub fn delete_removes_everything(backend: &dyn Backend) {
    let b = backend.fresh();
    let baseline = b.key_count().unwrap();
    let ids: Vec<TaskId> = (0..4)
        .map(|n| {
            let e = envelope(n);
            b.enqueue(&e).unwrap();
            e.task_id
        })
        .collect();
    claim(&*b, "w", LONG).unwrap();
    claim(&*b, "w", LONG).unwrap();
    b.put_outcome(&success(ids[0])).unwrap();
    b.fetch_outcome(ids[0], Utc::now()).unwrap();
    assert!(b.key_count().unwrap() <= baseline + 5 * ids.len() + 3);
    for id in &ids {
        b.delete_task(*id).unwrap();
        b.delete_task(*id).unwrap();
        assert!(matches!(b.get_status(*id), Err(BrokerError::UnknownTask(_))));
        assert!(matches!(b.fetch_outcome(*id, Utc::now()), Err(BrokerError::UnknownTask(_))));
    }
    assert!(b.scan_tasks().unwrap().is_empty());
    // Stale queue entries may remain until a worker drains them.
    assert!(claim(&*b, "w", LONG).is_none());
    assert_eq!(b.key_count().unwrap(), baseline);
}

pub fn claim_skips_deleted_and_finished(backend: &dyn Backend) {
    let b = backend.fresh();
    let (deleted, finished, live) = (envelope(1), envelope(2), envelope(3));
    for e in [&deleted, &finished, &live] {
        b.enqueue(e).unwrap();
    }
    b.delete_task(deleted.task_id).unwrap();
    b.put_outcome(&success(finished.task_id)).unwrap();
    assert_eq!(claim(&*b, "w", LONG).unwrap().task_id, live.task_id);
    assert_eq!(b.get_status(finished.task_id).unwrap(), TaskStatus::Ready);
    assert!(claim(&*b, "w", LONG).is_none());
}

pub fn scan_reports_metadata(backend: &dyn Backend) {
    let b = backend.fresh();
    assert!(b.scan_tasks().unwrap().is_empty());
    let mut old = envelope(1);
    old.created_at = esg_core::time::now() - chrono::Duration::days(3);
    let fresh = envelope(2);
    b.enqueue(&old).unwrap();
    b.enqueue(&fresh).unwrap();
    b.put_outcome(&success(fresh.task_id)).unwrap();
    let fetched_at = esg_core::time::now();
    b.fetch_outcome(fresh.task_id, fetched_at).unwrap();
    let mut scan = b.scan_tasks().unwrap();
    scan.sort_by_key(|s| s.created_at);
    assert_eq!(scan.len(), 2);
    assert_eq!((scan[0].task_id, scan[0].created_at), (old.task_id, old.created_at));
    assert_eq!((scan[0].first_fetched_at, scan[0].has_outcome), (None, false));
    assert_eq!((scan[1].task_id, scan[1].created_at), (fresh.task_id, fresh.created_at));
    assert_eq!((scan[1].first_fetched_at, scan[1].has_outcome), (Some(fetched_at), true));
}

pub fn cross_handle_visibility(backend: &dyn Backend) {
    let (a, b) = backend.fresh_pair();
    let e = envelope(1);
    a.enqueue(&e).unwrap();
    assert_eq!(b.get_status(e.task_id).unwrap(), TaskStatus::Queued);
    let got = claim(&*b, "w", LONG).unwrap();
    assert_eq!(a.get_status(got.task_id).unwrap(), TaskStatus::Running);
    b.put_outcome(&success(e.task_id)).unwrap();
    assert!(matches!(a.fetch_outcome(e.task_id, Utc::now()).unwrap(), Fetch::Ready(_)));
    a.delete_task(e.task_id).unwrap();
    assert!(matches!(b.get_status(e.task_id), Err(BrokerError::UnknownTask(_))));
}

pub fn blocking_claim_does_not_starve(backend: &dyn Backend) {
    let b = backend.fresh();
    let waiter = b.clone();
    let blocked = std::thread::spawn(move || {
        waiter.claim(&VersionTag::new("v9").unwrap(), EndpointKind::Request, "w", LONG, Duration::from_millis(800))
    });
    std::thread::sleep(Duration::from_millis(50));
    let started = Instant::now();
    for n in 0..20 {
        let e = envelope(n);
        b.enqueue(&e).unwrap();
        b.get_status(e.task_id).unwrap();
    }
    assert!(started.elapsed() < Duration::from_millis(500), "other calls waited {:?}", started.elapsed());
    assert!(blocked.join().unwrap().unwrap().is_none());
}

/// Workers that abandon tasks mid-way force redeliveries; every task must
/// still end with exactly one outcome and no two workers may hold a live
/// lease on the same task at once.
pub fn at_least_once_under_crashes(backend: &dyn Backend) {
    const TASKS: u64 = 120;
    let b = backend.fresh();
    let ids: HashSet<TaskId> = (0..TASKS)
        .map(|n| {
            let e = envelope(n);
            b.enqueue(&e).unwrap();
            e.task_id
        })
        .collect();
    let holders: Arc<Mutex<HashSet<TaskId>>> = Arc::default();
    let stored = Arc::new(AtomicUsize::new(0));
    let deliveries = Arc::new(AtomicUsize::new(0));
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let reaper = {
        let (b, stop) = (b.clone(), stop.clone());
        std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                b.reap_expired_claims(Utc::now()).unwrap();
                std::thread::sleep(Duration::from_millis(10));
            }
        })
    };
    let workers: Vec<_> = (0..4)
        .map(|w| {
            let (b, holders, stored, deliveries) = (b.clone(), holders.clone(), stored.clone(), deliveries.clone());
            std::thread::spawn(move || {
                let mut n = 0u64;
                let deadline = Instant::now() + Duration::from_secs(60);
                while stored.load(Ordering::SeqCst) < TASKS as usize && Instant::now() < deadline {
                    let got = b
                        .claim(&v1(), EndpointKind::Request, &format!("w{w}"), Duration::from_millis(250), Duration::from_millis(20))
                        .unwrap();
                    let Some(e) = got else { continue };
                    deliveries.fetch_add(1, Ordering::SeqCst);
                    n += 1;
                    // Every third delivery is abandoned like a crashed worker.
                    if (n + w).is_multiple_of(3) {
                        continue;
                    }
                    assert!(holders.lock().unwrap().insert(e.task_id), "two live holders of {}", e.task_id);
                    std::thread::sleep(Duration::from_millis(2));
                    holders.lock().unwrap().remove(&e.task_id);
                    match b.put_outcome(&success(e.task_id)) {
                        Ok(()) => {
                            stored.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(BrokerError::OutcomeAlreadySet(_)) => {}
                        Err(other) => panic!("{other}"),
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    stop.store(true, Ordering::SeqCst);
    reaper.join().unwrap();
    assert_eq!(stored.load(Ordering::SeqCst), TASKS as usize);
    assert!(deliveries.load(Ordering::SeqCst) > TASKS as usize, "crashes must cause redeliveries");
    for id in ids {
        assert_eq!(b.get_status(id).unwrap(), TaskStatus::Ready);
    }
}
