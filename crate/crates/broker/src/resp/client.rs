//! Blocking RESP2 client connections and a small connection pool.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use url::Url;

use super::codec::{read_value, write_command, RespValue};

/// Where the key-value store lives. Parsed from
/// `redis://[:password@]host[:port][/db]` (`resp://` is accepted as well).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RespConfig {
    pub host: String,
    pub port: u16,
    pub password: Option<String>,
    pub db: u32,
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
}

impl RespConfig {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        RespConfig {
            host: host.into(),
            port,
            password: None,
            db: 0,
            connect_timeout: Duration::from_secs(3),
            io_timeout: Duration::from_secs(10),
        }
    }

    pub fn from_url(text: &str) -> Result<Self, String> {
        let url = Url::parse(text).map_err(|e| format!("bad broker url {text:?}: {e}"))?;
        if !matches!(url.scheme(), "redis" | "resp") {
            return Err(format!("unsupported broker url scheme {:?}", url.scheme()));
        }
        let host = url.host_str().ok_or_else(|| format!("broker url {text:?} has no host"))?;
        let mut cfg = RespConfig::new(host.trim_start_matches('[').trim_end_matches(']'), url.port().unwrap_or(6379));
        cfg.password = url.password().map(str::to_owned);
        let path = url.path().trim_start_matches('/');
        if !path.is_empty() {
            cfg.db = path.parse().map_err(|_| format!("bad database index {path:?}"))?;
        }
        Ok(cfg)
    }
}

/// Error reply from the server, or a transport failure.
#[derive(Debug, thiserror::Error)]
pub enum RespError {
    #[error("broker i/o: {0}")]
    Io(#[from] io::Error),
    #[error("broker replied with error: {0}")]
    Server(String),
    #[error("unexpected broker reply: {0}")]
    Unexpected(String),
}

pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    io_timeout: Duration,
}

impl Connection {
    pub fn open(cfg: &RespConfig) -> Result<Self, RespError> {
        let addr = (cfg.host.as_str(), cfg.port)
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {}", cfg.host)))?;
        let stream = TcpStream::connect_timeout(&addr, cfg.connect_timeout)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(cfg.io_timeout))?;
        stream.set_write_timeout(Some(cfg.io_timeout))?;
        let mut conn = Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            io_timeout: cfg.io_timeout,
        };
        if let Some(pw) = &cfg.password {
            conn.call(&[b"AUTH", pw.as_bytes()])?;
        }
        if cfg.db != 0 {
            conn.call(&[b"SELECT", cfg.db.to_string().as_bytes()])?;
        }
        Ok(conn)
    }

    /// Sends one command and reads its reply. Error replies become
    /// [`RespError::Server`].
    pub fn call(&mut self, args: &[&[u8]]) -> Result<RespValue, RespError> {
        write_command(&mut self.writer, args)?;
        self.writer.flush()?;
        match read_value(&mut self.reader)? {
            RespValue::Error(e) => Err(RespError::Server(e)),
            v => Ok(v),
        }
    }

    /// Like [`call`](Self::call) for blocking commands: the read deadline is
    /// stretched to cover the server-side wait.
    pub fn call_blocking(&mut self, args: &[&[u8]], wait: Duration) -> Result<RespValue, RespError> {
        self.reader.get_ref().set_read_timeout(Some(wait + self.io_timeout))?;
        let reply = self.call(args);
        self.reader.get_ref().set_read_timeout(Some(self.io_timeout))?;
        reply
    }

    /// Sends all commands before reading any reply. Error replies are
    /// returned in place.
    pub fn pipeline(&mut self, commands: &[Vec<Vec<u8>>]) -> Result<Vec<RespValue>, RespError> {
        for cmd in commands {
            let args: Vec<&[u8]> = cmd.iter().map(Vec::as_slice).collect();
            write_command(&mut self.writer, &args)?;
        }
        self.writer.flush()?;
        commands.iter().map(|_| read_value(&mut self.reader).map_err(RespError::from)).collect()
    }
}

/// Reuses idle connections; a connection that saw a transport error is
/// dropped instead of being returned.
pub struct Pool {
    cfg: RespConfig,
    idle: Mutex<Vec<Connection>>,
    max_idle: usize,
}

impl Pool {
    pub fn new(cfg: RespConfig) -> Self {
        Pool { cfg, idle: Mutex::new(Vec::new()), max_idle: 16 }
    }

    pub fn config(&self) -> &RespConfig {
        &self.cfg
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut Connection) -> Result<T, RespError>) -> Result<T, RespError> {
        let pooled = self.idle.lock().unwrap_or_else(|p| p.into_inner()).pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => Connection::open(&self.cfg)?,
        };
        let result = f(&mut conn);
        if !matches!(result, Err(RespError::Io(_)) | Err(RespError::Unexpected(_))) {
            let mut idle = self.idle.lock().unwrap_or_else(|p| p.into_inner());
            if idle.len() < self.max_idle {
                idle.push(conn);
            }
        }
        result
    }
}
