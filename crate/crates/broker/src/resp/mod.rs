//! Minimal RESP2 protocol support: framing, a blocking client with a
//! connection pool, and an embedded store.

mod client;
mod codec;
mod server;

pub use client::{Connection, Pool, RespConfig, RespError};
pub use codec::{read_value, write_command, RespValue};
pub use server::StoreServer;
