//! A small in-memory RESP2 key-value store.
//!
//! It implements the subset of commands the RESP broker uses (plus a few
//! conveniences) with the same reply shapes as Redis, so the broker can be
//! exercised end to end without an external server, and a single-node
//! deployment can run without one.

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::codec::{read_value, RespValue};

const DATABASES: usize = 16;

enum Data {
    Str(Vec<u8>),
    List(VecDeque<Vec<u8>>),
}

struct Entry {
    data: Data,
    expires_at: Option<Instant>,
}

#[derive(Default)]
struct Db {
    entries: HashMap<Vec<u8>, Entry>,
}

impl Db {
    fn live(&mut self, key: &[u8]) -> Option<&mut Entry> {
        let expired = self.entries.get(key).is_some_and(|e| e.expires_at.is_some_and(|t| t <= Instant::now()));
        if expired {
            self.entries.remove(key);
        }
        self.entries.get_mut(key)
    }

    fn purge(&mut self) {
        let now = Instant::now();
        self.entries.retain(|_, e| e.expires_at.is_none_or(|t| t > now));
    }

    fn list(&mut self, key: &[u8]) -> Result<Option<&mut VecDeque<Vec<u8>>>, RespValue> {
        match self.live(key) {
            None => Ok(None),
            Some(Entry { data: Data::List(l), .. }) => Ok(Some(l)),
            Some(_) => Err(wrong_type()),
        }
    }

    fn list_or_create(&mut self, key: &[u8]) -> Result<&mut VecDeque<Vec<u8>>, RespValue> {
        if self.list(key)?.is_none() {
            self.entries.insert(key.to_vec(), Entry { data: Data::List(VecDeque::new()), expires_at: None });
        }
        Ok(self.list(key)?.expect("just inserted"))
    }

    /// Drops lists that became empty, as Redis does.
    fn drop_if_empty(&mut self, key: &[u8]) {
        if matches!(self.entries.get(key), Some(Entry { data: Data::List(l), .. }) if l.is_empty()) {
            self.entries.remove(key);
        }
    }

    fn rpoplpush(&mut self, src: &[u8], dst: &[u8]) -> Result<Option<Vec<u8>>, RespValue> {
        let Some(item) = self.list(src)?.and_then(VecDeque::pop_back) else {
            return Ok(None);
        };
        self.drop_if_empty(src);
        self.list_or_create(dst)?.push_front(item.clone());
        Ok(Some(item))
    }
}

struct Shared {
    dbs: Mutex<Vec<Db>>,
    pushed: Condvar,
    password: Option<String>,
    stopping: AtomicBool,
    clients: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Vec<Db>> {
        self.dbs.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// A running store. Dropping it stops the listener and closes all client
/// connections.
pub struct StoreServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl StoreServer {
    /// Binds and starts serving on a background thread. Use port 0 for an
    /// ephemeral port.
    pub fn start(bind: impl ToSocketAddrs, password: Option<String>) -> io::Result<StoreServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            dbs: Mutex::new((0..DATABASES).map(|_| Db::default()).collect()),
            pushed: Condvar::new(),
            password,
            stopping: AtomicBool::new(false),
            clients: Mutex::new(Vec::new()),
        });
        let accept_shared = shared.clone();
        let acceptor = std::thread::Builder::new().name("resp-store-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if accept_shared.stopping.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Ok(clone) = stream.try_clone() {
                    accept_shared.clients.lock().unwrap_or_else(|p| p.into_inner()).push(clone);
                }
                let conn_shared = accept_shared.clone();
                let _ = std::thread::Builder::new()
                    .name("resp-store-conn".into())
                    .spawn(move || serve_connection(stream, conn_shared));
            }
        })?;
        Ok(StoreServer { addr, shared, acceptor: Some(acceptor) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `redis://` URL for database `db`.
    pub fn url(&self, db: u32) -> String {
        match &self.shared.password {
            Some(pw) => format!("redis://:{pw}@{}/{db}", self.addr),
            None => format!("redis://{}/{db}", self.addr),
        }
    }

    /// Blocks until the store is stopped from another thread (or forever).
    pub fn join(mut self) {
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
    }

    pub fn stop(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the acceptor, then cut every client so blocked reads return.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for client in self.shared.clients.lock().unwrap_or_else(|p| p.into_inner()).drain(..) {
            let _ = client.shutdown(Shutdown::Both);
        }
        self.shared.pushed.notify_all();
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for StoreServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(stream: TcpStream, shared: Arc<Shared>) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    let mut session = Session { db: 0, authed: shared.password.is_none() };
    loop {
        let request = match read_value(&mut reader) {
            Ok(v) => v,
            Err(_) => return,
        };
        let (reply, quit) = match command_args(request) {
            Some(args) if !args.is_empty() => session.execute(&shared, &args),
            _ => (RespValue::Error("ERR Protocol error: expected array of bulk strings".into()), false),
        };
        if reply.write_to(&mut writer).and_then(|_| writer.flush()).is_err() || quit {
            return;
        }
        if shared.stopping.load(Ordering::SeqCst) {
            return;
        }
    }
}

fn command_args(v: RespValue) -> Option<Vec<Vec<u8>>> {
    match v {
        RespValue::Array(Some(items)) => items.into_iter().map(RespValue::into_bytes).collect(),
        _ => None,
    }
}

fn wrong_type() -> RespValue {
    RespValue::Error("WRONGTYPE Operation against a key holding the wrong kind of value".into())
}

fn syntax() -> RespValue {
    RespValue::Error("ERR syntax error".into())
}

fn arity(name: &str) -> RespValue {
    RespValue::Error(format!("ERR wrong number of arguments for '{}' command", name.to_lowercase()))
}

fn not_integer() -> RespValue {
    RespValue::Error("ERR value is not an integer or out of range".into())
}

fn int_arg(arg: &[u8]) -> Result<i64, RespValue> {
    std::str::from_utf8(arg).ok().and_then(|s| s.parse().ok()).ok_or_else(not_integer)
}

fn timeout_arg(arg: &[u8]) -> Result<Option<Duration>, RespValue> {
    let secs: f64 = std::str::from_utf8(arg)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|s: &f64| s.is_finite() && *s >= 0.0)
        .ok_or_else(|| RespValue::Error("ERR timeout is not a float or out of range".into()))?;
    Ok(if secs == 0.0 { None } else { Some(Duration::from_secs_f64(secs)) })
}

fn count(n: usize) -> RespValue {
    RespValue::Integer(n as i64)
}

struct Session {
    db: usize,
    authed: bool,
}

impl Session {
    fn execute(&mut self, shared: &Shared, args: &[Vec<u8>]) -> (RespValue, bool) {
        let name = String::from_utf8_lossy(&args[0]).to_uppercase();
        let rest = &args[1..];
        if name == "QUIT" {
            return (RespValue::ok(), true);
        }
        if name == "AUTH" {
            let reply = match (&shared.password, rest) {
                (None, _) => RespValue::Error("ERR AUTH <password> called without any password configured".into()),
                (Some(pw), [given]) if pw.as_bytes() == given.as_slice() => {
                    self.authed = true;
                    RespValue::ok()
                }
                (Some(_), [_]) => RespValue::Error("WRONGPASS invalid username-password pair".into()),
                _ => arity(&name),
            };
            return (reply, false);
        }
        if !self.authed {
            return (RespValue::Error("NOAUTH Authentication required.".into()), false);
        }
        let reply = self.dispatch(shared, &name, rest).unwrap_or_else(|e| e);
        (reply, false)
    }

    fn dispatch(&mut self, shared: &Shared, name: &str, a: &[Vec<u8>]) -> Result<RespValue, RespValue> {
        let need = |ok: bool| if ok { Ok(()) } else { Err(arity(name)) };
        match name {
            "PING" => Ok(match a {
                [] => RespValue::Simple("PONG".into()),
                [msg] => RespValue::bulk(msg.clone()),
                _ => return Err(arity(name)),
            }),
            "ECHO" => {
                need(a.len() == 1)?;
                Ok(RespValue::bulk(a[0].clone()))
            }
            "SELECT" => {
                need(a.len() == 1)?;
                let n = int_arg(&a[0])?;
                if !(0..DATABASES as i64).contains(&n) {
                    return Err(RespValue::Error("ERR DB index is out of range".into()));
                }
                self.db = n as usize;
                Ok(RespValue::ok())
            }
            "BRPOP" => self.brpop(shared, a),
            "BRPOPLPUSH" => self.brpoplpush(shared, a),
            _ => {
                let mut dbs = shared.lock();
                if name == "FLUSHALL" {
                    dbs.iter_mut().for_each(|db| db.entries.clear());
                    return Ok(RespValue::ok());
                }
                let db = &mut dbs[self.db];
                let reply = simple_command(db, name, a)?;
                if matches!(name, "LPUSH" | "RPUSH" | "RPOPLPUSH") {
                    shared.pushed.notify_all();
                }
                Ok(reply)
            }
        }
    }

    fn wait_for<T>(
        &self,
        shared: &Shared,
        timeout: Option<Duration>,
        mut attempt: impl FnMut(&mut Db) -> Result<Option<T>, RespValue>,
    ) -> Result<Option<T>, RespValue> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut dbs = shared.lock();
        loop {
            if let Some(v) = attempt(&mut dbs[self.db])? {
                shared.pushed.notify_all();
                return Ok(Some(v));
            }
            if shared.stopping.load(Ordering::SeqCst) {
                return Ok(None);
            }
            let slice = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    (d - now).min(Duration::from_secs(1))
                }
                None => Duration::from_secs(1),
            };
            dbs = shared.pushed.wait_timeout(dbs, slice).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    fn brpop(&self, shared: &Shared, a: &[Vec<u8>]) -> Result<RespValue, RespValue> {
        if a.len() < 2 {
            return Err(arity("BRPOP"));
        }
        let (keys, timeout) = a.split_at(a.len() - 1);
        let timeout = timeout_arg(&timeout[0])?;
        let popped = self.wait_for(shared, timeout, |db| {
            for key in keys {
                if let Some(item) = db.list(key)?.and_then(VecDeque::pop_back) {
                    db.drop_if_empty(key);
                    return Ok(Some((key.clone(), item)));
                }
            }
            Ok(None)
        })?;
        Ok(match popped {
            Some((k, v)) => RespValue::Array(Some(vec![RespValue::bulk(k), RespValue::bulk(v)])),
            None => RespValue::Array(None),
        })
    }

    fn brpoplpush(&self, shared: &Shared, a: &[Vec<u8>]) -> Result<RespValue, RespValue> {
        if a.len() != 3 {
            return Err(arity("BRPOPLPUSH"));
        }
        let timeout = timeout_arg(&a[2])?;
        let moved = self.wait_for(shared, timeout, |db| db.rpoplpush(&a[0], &a[1]))?;
        Ok(RespValue::Bulk(moved))
    }
}

fn simple_command(db: &mut Db, name: &str, a: &[Vec<u8>]) -> Result<RespValue, RespValue> {
    let need = |ok: bool| if ok { Ok(()) } else { Err(arity(name)) };
    match name {
        "GET" => {
            need(a.len() == 1)?;
            match db.live(&a[0]) {
                None => Ok(RespValue::nil()),
                Some(Entry { data: Data::Str(v), .. }) => Ok(RespValue::bulk(v.clone())),
                Some(_) => Err(wrong_type()),
            }
        }
        "SET" => {
            need(a.len() >= 2)?;
            let (mut nx, mut xx, mut ttl) = (false, false, None);
            let mut opts = a[2..].iter();
            while let Some(opt) = opts.next() {
                match String::from_utf8_lossy(opt).to_uppercase().as_str() {
                    "NX" => nx = true,
                    "XX" => xx = true,
                    unit @ ("EX" | "PX") => {
                        let n = int_arg(opts.next().ok_or_else(syntax)?)?;
                        if n <= 0 {
                            return Err(RespValue::Error("ERR invalid expire time in 'set' command".into()));
                        }
                        let n = n as u64;
                        ttl = Some(if unit == "EX" { Duration::from_secs(n) } else { Duration::from_millis(n) });
                    }
                    _ => return Err(syntax()),
                }
            }
            if nx && xx {
                return Err(syntax());
            }
            let exists = db.live(&a[0]).is_some();
            if (nx && exists) || (xx && !exists) {
                return Ok(RespValue::nil());
            }
            let expires_at = ttl.map(|t| Instant::now() + t);
            db.entries.insert(a[0].clone(), Entry { data: Data::Str(a[1].clone()), expires_at });
            Ok(RespValue::ok())
        }
        "DEL" | "EXISTS" => {
            need(!a.is_empty())?;
            let mut n = 0;
            for key in a {
                if db.live(key).is_some() {
                    n += 1;
                    if name == "DEL" {
                        db.entries.remove(key);
                    }
                }
            }
            Ok(count(n))
        }
        "EXPIRE" | "PEXPIRE" => {
            need(a.len() == 2)?;
            let n = int_arg(&a[1])?;
            let Some(entry) = db.live(&a[0]) else { return Ok(count(0)) };
            if n <= 0 {
                db.entries.remove(&a[0]);
                return Ok(count(1));
            }
            let n = n as u64;
            let ttl = if name == "EXPIRE" { Duration::from_secs(n) } else { Duration::from_millis(n) };
            entry.expires_at = Some(Instant::now() + ttl);
            Ok(count(1))
        }
        "TTL" | "PTTL" => {
            need(a.len() == 1)?;
            Ok(RespValue::Integer(match db.live(&a[0]) {
                None => -2,
                Some(Entry { expires_at: None, .. }) => -1,
                Some(Entry { expires_at: Some(t), .. }) => {
                    let left = t.saturating_duration_since(Instant::now());
                    if name == "TTL" {
                        left.as_secs_f64().round() as i64
                    } else {
                        left.as_millis() as i64
                    }
                }
            }))
        }
        "LPUSH" | "RPUSH" => {
            need(a.len() >= 2)?;
            let list = db.list_or_create(&a[0])?;
            for item in &a[1..] {
                if name == "LPUSH" {
                    list.push_front(item.clone());
                } else {
                    list.push_back(item.clone());
                }
            }
            Ok(count(list.len()))
        }
        "LPOP" | "RPOP" => {
            need(a.len() == 1)?;
            let item = db.list(&a[0])?.and_then(|l| if name == "LPOP" { l.pop_front() } else { l.pop_back() });
            db.drop_if_empty(&a[0]);
            Ok(RespValue::Bulk(item))
        }
        "RPOPLPUSH" => {
            need(a.len() == 2)?;
            Ok(RespValue::Bulk(db.rpoplpush(&a[0], &a[1])?))
        }
        "LLEN" => {
            need(a.len() == 1)?;
            Ok(count(db.list(&a[0])?.map_or(0, |l| l.len())))
        }
        "LRANGE" => {
            need(a.len() == 3)?;
            let (start, stop) = (int_arg(&a[1])?, int_arg(&a[2])?);
            let Some(list) = db.list(&a[0])? else { return Ok(RespValue::Array(Some(vec![]))) };
            let len = list.len() as i64;
            let norm = |i: i64| if i < 0 { (len + i).max(0) } else { i };
            let (lo, hi) = (norm(start), norm(stop).min(len - 1));
            let items = if lo > hi || lo >= len {
                vec![]
            } else {
                list.range(lo as usize..=hi as usize).cloned().map(RespValue::bulk).collect()
            };
            Ok(RespValue::Array(Some(items)))
        }
        "LREM" => {
            need(a.len() == 3)?;
            let n = int_arg(&a[1])?;
            let Some(list) = db.list(&a[0])? else { return Ok(count(0)) };
            let limit = if n == 0 { usize::MAX } else { n.unsigned_abs() as usize };
            let mut removed = 0;
            if n >= 0 {
                let mut i = 0;
                while i < list.len() && removed < limit {
                    if list[i] == a[2] {
                        list.remove(i);
                        removed += 1;
                    } else {
                        i += 1;
                    }
                }
            } else {
                let mut i = list.len();
                while i > 0 && removed < limit {
                    i -= 1;
                    if list[i] == a[2] {
                        list.remove(i);
                        removed += 1;
                    }
                }
            }
            db.drop_if_empty(&a[0]);
            Ok(count(removed))
        }
        "DBSIZE" => {
            need(a.is_empty())?;
            db.purge();
            Ok(count(db.entries.len()))
        }
        "FLUSHDB" => {
            db.entries.clear();
            Ok(RespValue::ok())
        }
        "KEYS" => {
            need(a.len() == 1)?;
            db.purge();
            let prefix = a[0].strip_suffix(b"*").unwrap_or(&a[0]);
            let exact = !a[0].ends_with(b"*");
            let mut keys: Vec<&Vec<u8>> = db
                .entries
                .keys()
                .filter(|k| if exact { k.as_slice() == prefix } else { k.starts_with(prefix) })
                .collect();
            keys.sort();
            Ok(RespValue::Array(Some(keys.into_iter().cloned().map(RespValue::bulk).collect())))
        }
        _ => Err(RespValue::Error(format!("ERR unknown command '{}'", name.to_lowercase()))),
    }
}
