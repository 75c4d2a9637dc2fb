//! Shared building blocks of the energy service gateway: the task lifecycle,
//! declarative data models with OpenAPI output, and service definitions.

pub mod backoff;
pub mod schema;
pub mod service;
pub mod task;
pub mod time;

pub use backoff::Backoff;
pub use schema::{validate, SchemaNode, ValidationErrors, ValidationIssue};
pub use service::{Endpoint, Handler, HandlerError, Progress, RouteError, ServiceSpec, SpecError, VersionSpec};
pub use task::{
    apply_transition, new_task_id, EndpointKind, IllegalTransition, TaskEnvelope, TaskId, TaskOutcome, TaskStatus,
    Verdict, VersionTag,
};
