//! The three process roles of a gateway deployment: the HTTP API
//! ([`api`]), the worker running service code ([`worker`]) and the garbage
//! collector ([`gc`]). All of them share state only through a
//! [`Broker`](esg_broker::Broker).

pub mod api;
pub mod auth;
pub mod gc;
mod shutdown;
#[cfg(feature = "testkit")]
pub mod testkit;
pub mod worker;

pub use api::{ApiConfig, ApiServer, ApiState};
pub use auth::{AuthPolicy, Authenticator, KeySource};
pub use gc::{run_gc, sweep, GcPolicy};
pub use shutdown::Shutdown;
pub use worker::{Worker, WorkerConfig};
