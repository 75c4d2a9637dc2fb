use std::collections::HashSet;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use esg_core::{apply_transition, EndpointKind, TaskEnvelope, TaskId, TaskOutcome, TaskStatus, VersionTag};
use serde::{Deserialize, Serialize};

use crate::resp::{Connection, Pool, RespConfig, RespError, RespValue};
use crate::{Broker, BrokerError, BrokerResult, ClaimLease, Fetch, KeyLayout, TaskSummary};

/// Per-task bookkeeping stored next to the envelope, so that the envelope
/// (possibly megabytes) is written once and never rewritten.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    #[serde(with = "esg_core::time::rfc3339")]
    created_at: DateTime<Utc>,
    #[serde(default, with = "esg_core::time::rfc3339_opt")]
    first_fetched_at: Option<DateTime<Utc>>,
    attempt: u32,
}

/// Broker backed by a RESP2 key-value store.
///
/// Queues are lists fed with `LPUSH` and drained with `RPOPLPUSH` into a
/// processing list, so a task popped by a worker that dies before writing
/// its lease is still found by the reaper. Key counts are taken with
/// `DBSIZE`; give each deployment its own logical database.
pub struct RespBroker {
    pool: Pool,
    keys: KeyLayout,
    orphan_grace: Duration,
}

fn unavailable(e: RespError) -> BrokerError {
    match e {
        RespError::Io(e) => BrokerError::Unavailable(e.to_string()),
        RespError::Server(e) if e.starts_with("LOADING") || e.starts_with("BUSY") => BrokerError::Unavailable(e),
        other => BrokerError::Corrupt(other.to_string()),
    }
}

fn corrupt(what: &str, e: impl std::fmt::Display) -> BrokerError {
    BrokerError::Corrupt(format!("{what}: {e}"))
}

fn decode<T: for<'de> Deserialize<'de>>(what: &str, bytes: &[u8]) -> BrokerResult<T> {
    serde_json::from_slice(bytes).map_err(|e| corrupt(what, e))
}

fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("broker records serialize to JSON")
}

fn cmd<const N: usize>(parts: [&[u8]; N]) -> Vec<Vec<u8>> {
    parts.iter().map(|p| p.to_vec()).collect()
}

/// Rejects error replies inside a pipeline.
fn checked(replies: Vec<RespValue>) -> Result<Vec<RespValue>, RespError> {
    replies
        .into_iter()
        .map(|r| match r {
            RespValue::Error(e) => Err(RespError::Server(e)),
            other => Ok(other),
        })
        .collect()
}

fn integer(reply: &RespValue) -> Result<i64, RespError> {
    reply.as_integer().ok_or_else(|| RespError::Unexpected(format!("expected integer, got {reply:?}")))
}

fn bytes(reply: RespValue) -> Result<Option<Vec<u8>>, RespError> {
    match reply {
        RespValue::Bulk(b) => Ok(b),
        other => Err(RespError::Unexpected(format!("expected bulk string, got {other:?}"))),
    }
}

fn list(reply: RespValue) -> Result<Vec<Vec<u8>>, RespError> {
    match reply {
        RespValue::Array(Some(items)) => items.into_iter().map(|i| bytes(i).map(Option::unwrap_or_default)).collect(),
        RespValue::Array(None) => Ok(vec![]),
        other => Err(RespError::Unexpected(format!("expected array, got {other:?}"))),
    }
}

fn get(conn: &mut Connection, key: &str) -> Result<Option<Vec<u8>>, RespError> {
    bytes(conn.call(&[b"GET", key.as_bytes()])?)
}

fn exists(conn: &mut Connection, key: &str) -> Result<bool, RespError> {
    Ok(integer(&conn.call(&[b"EXISTS", key.as_bytes()])?)? > 0)
}

impl RespBroker {
    pub fn new(cfg: RespConfig, namespace: impl Into<String>) -> Self {
        RespBroker { pool: Pool::new(cfg), keys: KeyLayout::new(namespace), orphan_grace: Duration::from_secs(60) }
    }

    /// Parses the URL and checks that the store answers.
    pub fn connect(url: &str, namespace: impl Into<String>) -> BrokerResult<Self> {
        let cfg = RespConfig::from_url(url).map_err(BrokerError::Unavailable)?;
        let broker = RespBroker::new(cfg, namespace);
        broker.run(|c| c.call(&[b"PING"]))?;
        Ok(broker)
    }

    /// How long a task may sit in the processing list without a lease
    /// before the reaper gives it one and, once that expires, re-queues it.
    pub fn with_orphan_grace(mut self, grace: Duration) -> Self {
        self.orphan_grace = grace;
        self
    }

    pub fn keys(&self) -> &KeyLayout {
        &self.keys
    }

    fn run<T>(&self, f: impl FnOnce(&mut Connection) -> Result<T, RespError>) -> BrokerResult<T> {
        self.pool.with(f).map_err(unavailable)
    }

    fn meta(&self, conn: &mut Connection, id: TaskId) -> BrokerResult<Option<Meta>> {
        let raw = get(conn, &self.keys.meta(id)).map_err(unavailable)?;
        raw.map(|b| decode("task meta", &b)).transpose()
    }

    fn unknown_unless_exists(&self, conn: &mut Connection, id: TaskId) -> BrokerResult<()> {
        if exists(conn, &self.keys.envelope(id)).map_err(unavailable)? {
            Ok(())
        } else {
            Err(BrokerError::UnknownTask(id))
        }
    }

    /// Pops one id into the processing list, waiting up to `wait`.
    fn pop(&self, conn: &mut Connection, queue: &str, wait: Duration) -> Result<Option<Vec<u8>>, RespError> {
        let processing = self.keys.processing();
        if wait < Duration::from_millis(1) {
            bytes(conn.call(&[b"RPOPLPUSH", queue.as_bytes(), processing.as_bytes()])?)
        } else {
            let secs = format!("{:.3}", wait.as_secs_f64());
            bytes(conn.call_blocking(&[b"BRPOPLPUSH", queue.as_bytes(), processing.as_bytes(), secs.as_bytes()], wait)?)
        }
    }

    fn take(&self, conn: &mut Connection, raw_id: &[u8], lease: &ClaimLease) -> BrokerResult<Option<TaskEnvelope>> {
        let processing = self.keys.processing();
        let discard = |conn: &mut Connection| -> BrokerResult<()> {
            conn.call(&[b"LREM", processing.as_bytes(), b"0", raw_id]).map_err(unavailable)?;
            Ok(())
        };
        let Some(id) = std::str::from_utf8(raw_id).ok().and_then(|s| s.parse::<TaskId>().ok()) else {
            tracing::warn!(entry = %String::from_utf8_lossy(raw_id), "dropping malformed queue entry");
            discard(conn)?;
            return Ok(None);
        };
        let replies = conn
            .pipeline(&[
                cmd([b"GET", self.keys.envelope(id).as_bytes()]),
                cmd([b"GET", self.keys.meta(id).as_bytes()]),
                cmd([b"EXISTS", self.keys.outcome(id).as_bytes()]),
            ])
            .and_then(checked)
            .map_err(unavailable)?;
        let [envelope, meta, has_outcome]: [RespValue; 3] =
            replies.try_into().map_err(|_| corrupt("claim", "short pipeline reply"))?;
        let (Some(envelope), Some(meta)) = (bytes(envelope).map_err(unavailable)?, bytes(meta).map_err(unavailable)?)
        else {
            // Deleted while queued.
            discard(conn)?;
            return Ok(None);
        };
        if integer(&has_outcome).map_err(unavailable)? > 0 {
            // Finished by an earlier delivery.
            discard(conn)?;
            return Ok(None);
        }
        let mut envelope: TaskEnvelope = decode("task envelope", &envelope)?;
        let meta: Meta = decode("task meta", &meta)?;
        envelope.attempt = meta.attempt;
        let claim_key = self.keys.claim(id);
        let lease_json = encode(lease);
        let fresh = conn.call(&[b"SET", claim_key.as_bytes(), &lease_json, b"NX"]).map_err(unavailable)?;
        if fresh.is_nil() {
            // The reaper marked the entry as orphaned before we wrote our lease.
            conn.call(&[b"SET", claim_key.as_bytes(), &lease_json]).map_err(unavailable)?;
        }
        conn.call(&[b"SET", self.keys.status(id).as_bytes(), TaskStatus::Running.as_str().as_bytes()])
            .map_err(unavailable)?;
        Ok(Some(envelope))
    }

    /// Re-queues one expired lease. Returns whether this caller did it.
    fn requeue(&self, conn: &mut Connection, id: TaskId, raw_id: &[u8]) -> BrokerResult<bool> {
        // Whoever deletes the lease owns the re-queue.
        let won = integer(&conn.call(&[b"DEL", self.keys.claim(id).as_bytes()]).map_err(unavailable)?)
            .map_err(unavailable)?
            > 0;
        if !won {
            return Ok(false);
        }
        conn.call(&[b"LREM", self.keys.processing().as_bytes(), b"0", raw_id]).map_err(unavailable)?;
        let Some(mut meta) = self.meta(conn, id)? else { return Ok(false) };
        let envelope = get(conn, &self.keys.envelope(id)).map_err(unavailable)?;
        let Some(envelope) = envelope else { return Ok(false) };
        let envelope: TaskEnvelope = decode("task envelope", &envelope)?;
        meta.attempt += 1;
        conn.pipeline(&[
            cmd([b"SET", self.keys.meta(id).as_bytes(), &encode(&meta), b"XX"]),
            cmd([b"SET", self.keys.status(id).as_bytes(), TaskStatus::Queued.as_str().as_bytes(), b"XX"]),
            cmd([b"LPUSH", self.keys.queue(&envelope.version, envelope.kind).as_bytes(), raw_id]),
        ])
        .and_then(checked)
        .map_err(unavailable)?;
        Ok(true)
    }
}

impl Broker for RespBroker {
    fn enqueue(&self, envelope: &TaskEnvelope) -> BrokerResult<()> {
        let id = envelope.task_id;
        let id_text = id.to_string();
        let meta = Meta { created_at: envelope.created_at, first_fetched_at: None, attempt: envelope.attempt };
        self.run(|c| {
            let stored = c.call(&[b"SET", self.keys.envelope(id).as_bytes(), &encode(envelope), b"NX"])?;
            if stored.is_nil() {
                return Ok(false);
            }
            checked(c.pipeline(&[
                cmd([b"SET", self.keys.meta(id).as_bytes(), &encode(&meta)]),
                cmd([b"SET", self.keys.status(id).as_bytes(), TaskStatus::Queued.as_str().as_bytes()]),
                cmd([b"RPUSH", self.keys.index().as_bytes(), id_text.as_bytes()]),
                cmd([b"LPUSH", self.keys.queue(&envelope.version, envelope.kind).as_bytes(), id_text.as_bytes()]),
            ])?)?;
            Ok(true)
        })?
        .then_some(())
        .ok_or(BrokerError::DuplicateTask(id))
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
        let queue = self.keys.queue(version, kind);
        loop {
            let remaining = until.saturating_duration_since(Instant::now());
            let popped = self.run(|c| self.pop(c, &queue, remaining))?;
            let Some(raw_id) = popped else { return Ok(None) };
            let lease = ClaimLease::new(worker_id, visibility);
            let taken = self.pool.with(|c| Ok(self.take(c, &raw_id, &lease))).map_err(unavailable)??;
            if let Some(envelope) = taken {
                return Ok(Some(envelope));
            }
        }
    }

    fn renew_lease(&self, task_id: TaskId, worker_id: &str, visibility: Duration) -> BrokerResult<()> {
        let key = self.keys.claim(task_id);
        let current = self.run(|c| get(c, &key))?;
        let Some(current) = current else { return Err(BrokerError::LeaseLost(task_id)) };
        let mut lease: ClaimLease = decode("claim lease", &current)?;
        if lease.worker_id != worker_id {
            return Err(BrokerError::LeaseLost(task_id));
        }
        lease.visibility_deadline = crate::deadline(esg_core::time::now(), visibility);
        let renewed = self.run(|c| c.call(&[b"SET", key.as_bytes(), &encode(&lease), b"XX"]))?;
        if renewed.is_nil() {
            return Err(BrokerError::LeaseLost(task_id));
        }
        Ok(())
    }

    fn reap_expired_claims(&self, now: DateTime<Utc>) -> BrokerResult<usize> {
        let processing = self.keys.processing();
        let entries = self.run(|c| list(c.call(&[b"LRANGE", processing.as_bytes(), b"0", b"-1"])?))?;
        let mut seen = HashSet::new();
        let mut count = 0;
        for raw_id in entries {
            if !seen.insert(raw_id.clone()) {
                continue;
            }
            let Some(id) = std::str::from_utf8(&raw_id).ok().and_then(|s| s.parse::<TaskId>().ok()) else {
                self.run(|c| c.call(&[b"LREM", processing.as_bytes(), b"0", &raw_id]))?;
                continue;
            };
            let reaped = self.pool.with(|c| {
                let replies = checked(c.pipeline(&[
                    cmd([b"GET", self.keys.claim(id).as_bytes()]),
                    cmd([b"EXISTS", self.keys.outcome(id).as_bytes()]),
                    cmd([b"EXISTS", self.keys.envelope(id).as_bytes()]),
                ])?)?;
                Ok(replies)
            });
            let [lease, has_outcome, has_envelope]: [RespValue; 3] = reaped
                .map_err(unavailable)?
                .try_into()
                .map_err(|_| corrupt("reap", "short pipeline reply"))?;
            let done = integer(&has_outcome).map_err(unavailable)? > 0;
            let gone = integer(&has_envelope).map_err(unavailable)? == 0;
            if done || gone {
                self.run(|c| c.call(&[b"LREM", processing.as_bytes(), b"0", &raw_id]))?;
                continue;
            }
            match bytes(lease).map_err(unavailable)? {
                None => {
                    let orphan = ClaimLease {
                        worker_id: String::new(),
                        claimed_at: now,
                        visibility_deadline: crate::deadline(now, self.orphan_grace),
                    };
                    self.run(|c| c.call(&[b"SET", self.keys.claim(id).as_bytes(), &encode(&orphan), b"NX"]))?;
                }
                Some(raw) => {
                    let lease: ClaimLease = decode("claim lease", &raw)?;
                    if lease.visibility_deadline < now
                        && self.pool.with(|c| Ok(self.requeue(c, id, &raw_id))).map_err(unavailable)??
                    {
                        count += 1;
                    }
                }
            }
        }
        Ok(count)
    }

    fn set_status(&self, task_id: TaskId, status: TaskStatus) -> BrokerResult<()> {
        let key = self.keys.status(task_id);
        let current = self.run(|c| get(c, &key))?.ok_or(BrokerError::UnknownTask(task_id))?;
        let current: TaskStatus = std::str::from_utf8(&current)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("task status", String::from_utf8_lossy(&current)))?;
        let next = apply_transition(current, status)?;
        let written = self.run(|c| c.call(&[b"SET", key.as_bytes(), next.as_str().as_bytes(), b"XX"]))?;
        if written.is_nil() {
            return Err(BrokerError::UnknownTask(task_id));
        }
        Ok(())
    }

    fn get_status(&self, task_id: TaskId) -> BrokerResult<TaskStatus> {
        let replies = self.run(|c| {
            checked(c.pipeline(&[
                cmd([b"GET", self.keys.status(task_id).as_bytes()]),
                cmd([b"EXISTS", self.keys.outcome(task_id).as_bytes()]),
            ])?)
        })?;
        let [status, has_outcome]: [RespValue; 2] =
            replies.try_into().map_err(|_| corrupt("status", "short pipeline reply"))?;
        let status = bytes(status).map_err(unavailable)?.ok_or(BrokerError::UnknownTask(task_id))?;
        // A claim racing with `put_outcome` may overwrite `ready` with
        // `running`; the outcome key is authoritative.
        if integer(&has_outcome).map_err(unavailable)? > 0 {
            return Ok(TaskStatus::Ready);
        }
        std::str::from_utf8(&status)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("task status", String::from_utf8_lossy(&status)))
    }

    fn put_outcome(&self, outcome: &TaskOutcome) -> BrokerResult<()> {
        let id = outcome.task_id();
        self.pool.with(|c| Ok(self.unknown_unless_exists(c, id))).map_err(unavailable)??;
        let stored = self.run(|c| c.call(&[b"SET", self.keys.outcome(id).as_bytes(), &encode(outcome), b"NX"]))?;
        if stored.is_nil() {
            return Err(BrokerError::OutcomeAlreadySet(id));
        }
        let id_text = id.to_string();
        self.run(|c| {
            checked(c.pipeline(&[
                cmd([b"SET", self.keys.status(id).as_bytes(), TaskStatus::Ready.as_str().as_bytes(), b"XX"]),
                cmd([b"DEL", self.keys.claim(id).as_bytes()]),
                cmd([b"LREM", self.keys.processing().as_bytes(), b"0", id_text.as_bytes()]),
            ])?)
        })?;
        Ok(())
    }

    fn fetch_outcome(&self, task_id: TaskId, now: DateTime<Utc>) -> BrokerResult<Fetch> {
        self.pool
            .with(|c| {
                Ok((|| {
                    let Some(raw) = get(c, &self.keys.outcome(task_id)).map_err(unavailable)? else {
                        self.unknown_unless_exists(c, task_id)?;
                        return Ok(Fetch::NotReady);
                    };
                    let mut outcome: TaskOutcome = decode("task outcome", &raw)?;
                    let mut meta = self.meta(c, task_id)?.ok_or(BrokerError::UnknownTask(task_id))?;
                    if meta.first_fetched_at.is_none() {
                        meta.first_fetched_at = Some(now);
                        c.call(&[b"SET", self.keys.meta(task_id).as_bytes(), &encode(&meta), b"XX"])
                            .map_err(unavailable)?;
                    }
                    outcome.mark_fetched(meta.first_fetched_at.unwrap_or(now));
                    Ok(Fetch::Ready(outcome))
                })())
            })
            .map_err(unavailable)?
    }

    fn delete_task(&self, task_id: TaskId) -> BrokerResult<()> {
        let [outcome, status, meta, claim, envelope] = self.keys.task_keys(task_id);
        let id_text = task_id.to_string();
        self.run(|c| {
            checked(c.pipeline(&[
                cmd([b"DEL", outcome.as_bytes(), status.as_bytes(), meta.as_bytes(), claim.as_bytes()]),
                cmd([b"DEL", envelope.as_bytes()]),
                cmd([b"LREM", self.keys.index().as_bytes(), b"0", id_text.as_bytes()]),
                cmd([b"LREM", self.keys.processing().as_bytes(), b"0", id_text.as_bytes()]),
            ])?)
        })?;
        Ok(())
    }

    fn scan_tasks(&self) -> BrokerResult<Vec<TaskSummary>> {
        let index = self.keys.index();
        let ids = self.run(|c| list(c.call(&[b"LRANGE", index.as_bytes(), b"0", b"-1"])?))?;
        let mut out = Vec::with_capacity(ids.len());
        let mut stale = Vec::new();
        for chunk in ids.chunks(256) {
            let parsed: Vec<Option<TaskId>> =
                chunk.iter().map(|raw| std::str::from_utf8(raw).ok().and_then(|s| s.parse().ok())).collect();
            let mut commands = Vec::new();
            for id in parsed.iter().flatten() {
                commands.push(cmd([b"GET", self.keys.meta(*id).as_bytes()]));
                commands.push(cmd([b"EXISTS", self.keys.outcome(*id).as_bytes()]));
                commands.push(cmd([b"EXISTS", self.keys.envelope(*id).as_bytes()]));
            }
            let mut replies = self.run(|c| checked(c.pipeline(&commands)?))?.into_iter();
            for (raw, id) in chunk.iter().zip(parsed) {
                let Some(task_id) = id else {
                    stale.push(raw.clone());
                    continue;
                };
                let (Some(meta), Some(has_outcome), Some(has_envelope)) = (replies.next(), replies.next(), replies.next())
                else {
                    return Err(corrupt("scan", "short pipeline reply"));
                };
                match bytes(meta).map_err(unavailable)? {
                    Some(meta) => {
                        let meta: Meta = decode("task meta", &meta)?;
                        out.push(TaskSummary {
                            task_id,
                            created_at: meta.created_at,
                            first_fetched_at: meta.first_fetched_at,
                            has_outcome: integer(&has_outcome).map_err(unavailable)? > 0,
                        });
                    }
                    // No meta and no envelope: left behind by an interrupted delete.
                    None if integer(&has_envelope).map_err(unavailable)? == 0 => stale.push(raw.clone()),
                    // Enqueue in progress; the next scan sees it.
                    None => {}
                }
            }
        }
        for raw in stale {
            self.run(|c| c.call(&[b"LREM", index.as_bytes(), b"0", &raw]))?;
        }
        Ok(out)
    }

    fn key_count(&self) -> BrokerResult<usize> {
        let n = self.run(|c| integer(&c.call(&[b"DBSIZE"])?))?;
        Ok(n.max(0) as usize)
    }
}
