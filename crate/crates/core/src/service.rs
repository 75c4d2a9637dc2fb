//! Service definitions: which versions exist, what each endpoint accepts and
//! returns, and the code that computes results.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde_json::Value;

use crate::schema::{SchemaError, SchemaNode};
use crate::task::{EndpointKind, VersionTag};

/// Failure raised by service code. The message reaches the user as the
/// `detail` of the failed result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerError(pub String);

impl HandlerError {
    pub fn new(message: impl Into<String>) -> Self {
        HandlerError(message.into())
    }
}

impl fmt::Display for HandlerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for HandlerError {}

impl From<String> for HandlerError {
    fn from(value: String) -> Self {
        HandlerError(value)
    }
}

impl From<&str> for HandlerError {
    fn from(value: &str) -> Self {
        HandlerError(value.to_owned())
    }
}

/// Handed to service code so long computations can signal liveness.
/// Each report renews the worker's lease on the task.
#[derive(Clone, Default)]
pub struct Progress {
    beat: Option<Arc<dyn Fn() + Send + Sync>>,
}

impl Progress {
    pub fn new(beat: impl Fn() + Send + Sync + 'static) -> Self {
        Progress { beat: Some(Arc::new(beat)) }
    }

    pub fn noop() -> Self {
        Progress::default()
    }

    pub fn report(&self) {
        if let Some(beat) = &self.beat {
            beat();
        }
    }
}

impl fmt::Debug for Progress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Progress").field("active", &self.beat.is_some()).finish()
    }
}

/// The forecasting or optimization code behind one endpoint.
pub trait Handler: Send + Sync + 'static {
    fn handle(&self, input: &Value, progress: &Progress) -> Result<Value, HandlerError>;
}

impl<F> Handler for F
where
    F: Fn(&Value, &Progress) -> Result<Value, HandlerError> + Send + Sync + 'static,
{
    fn handle(&self, input: &Value, progress: &Progress) -> Result<Value, HandlerError> {
        self(input, progress)
    }
}

/// Input schema, output schema and handler of one endpoint kind.
#[derive(Clone)]
pub struct Endpoint {
    pub input: SchemaNode,
    pub output: SchemaNode,
    pub handler: Arc<dyn Handler>,
}

impl Endpoint {
    pub fn new(input: SchemaNode, output: SchemaNode, handler: impl Handler) -> Self {
        Endpoint { input, output, handler: Arc::new(handler) }
    }
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint").field("input", &self.input).field("output", &self.output).finish_non_exhaustive()
    }
}

/// One version of a service. Fitting is supported iff `fit` is present.
#[derive(Debug, Clone)]
pub struct VersionSpec {
    pub request: Endpoint,
    pub fit: Option<Endpoint>,
}

impl VersionSpec {
    pub fn new(request: Endpoint) -> Self {
        VersionSpec { request, fit: None }
    }

    pub fn with_fitting(mut self, fit: Endpoint) -> Self {
        self.fit = Some(fit);
        self
    }

    pub fn endpoint(&self, kind: EndpointKind) -> Option<&Endpoint> {
        match kind {
            EndpointKind::Request => Some(&self.request),
            EndpointKind::FitParameters => self.fit.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("service {0:?} declares no versions")]
    NoVersions(String),
    #[error("{version} {kind} {side} schema: {source}")]
    Schema {
        version: VersionTag,
        kind: EndpointKind,
        side: &'static str,
        #[source]
        source: SchemaError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("unknown version {0}")]
    UnknownVersion(String),
    #[error("version {version} does not support /{kind}/")]
    UnsupportedEndpoint { version: VersionTag, kind: EndpointKind },
}

/// A versioned service definition.
///
/// ```
/// use esg_core::schema::SchemaNode;
/// use esg_core::service::{Endpoint, ServiceSpec, VersionSpec};
/// use serde_json::json;
///
/// let echo = Endpoint::new(
///     SchemaNode::object().field("x", SchemaNode::number()),
///     SchemaNode::object().field("x", SchemaNode::number()),
///     |input: &serde_json::Value, _: &_| Ok(input.clone()),
/// );
/// let spec = ServiceSpec::new("echo").version("v1", VersionSpec::new(echo));
/// assert!(spec.check().is_ok());
/// ```
#[derive(Debug, Clone)]
pub struct ServiceSpec {
    name: String,
    description: Option<String>,
    versions: BTreeMap<VersionTag, VersionSpec>,
}

impl ServiceSpec {
    pub fn new(name: impl Into<String>) -> Self {
        ServiceSpec { name: name.into(), description: None, versions: BTreeMap::new() }
    }

    pub fn describe(mut self, text: impl Into<String>) -> Self {
        self.description = Some(text.into());
        self
    }

    /// Adds or replaces a version. Panics if `tag` is not of the form `v<digits>`.
    pub fn version(mut self, tag: &str, spec: VersionSpec) -> Self {
        let tag = VersionTag::new(tag).unwrap_or_else(|e| panic!("{e}"));
        self.versions.insert(tag, spec);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> Option<&str> {
        self.description.as_deref()
    }

    /// Versions in ascending order.
    pub fn versions(&self) -> impl Iterator<Item = (&VersionTag, &VersionSpec)> {
        self.versions.iter()
    }

    pub fn get(&self, version: &str) -> Option<&VersionSpec> {
        let tag = VersionTag::new(version).ok()?;
        self.versions.get(&tag)
    }

    /// Resolves the endpoint serving `/{version}/{kind}/`.
    pub fn endpoint(&self, version: &str, kind: EndpointKind) -> Result<&Endpoint, RouteError> {
        let tag = VersionTag::new(version).map_err(|_| RouteError::UnknownVersion(version.to_owned()))?;
        let v = self.versions.get(&tag).ok_or_else(|| RouteError::UnknownVersion(version.to_owned()))?;
        v.endpoint(kind).ok_or(RouteError::UnsupportedEndpoint { version: tag, kind })
    }

    /// A copy restricted to one version.
    pub fn only(&self, version: &str) -> Option<ServiceSpec> {
        let tag = VersionTag::new(version).ok()?;
        let v = self.versions.get(&tag)?.clone();
        Some(ServiceSpec {
            name: self.name.clone(),
            description: self.description.clone(),
            versions: BTreeMap::from([(tag, v)]),
        })
    }

    pub fn check(&self) -> Result<(), SpecError> {
        if self.versions.is_empty() {
            return Err(SpecError::NoVersions(self.name.clone()));
        }
        for (version, v) in &self.versions {
            for kind in EndpointKind::ALL {
                let Some(endpoint) = v.endpoint(kind) else { continue };
                for (side, node) in [("input", &endpoint.input), ("output", &endpoint.output)] {
                    node.check().map_err(|source| SpecError::Schema {
                        version: version.clone(),
                        kind,
                        side,
                        source,
                    })?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn echo() -> Endpoint {
        Endpoint::new(SchemaNode::boolean(), SchemaNode::boolean(), |v: &Value, _: &Progress| Ok(v.clone()))
    }

    #[test]
    fn routing() {
        let spec = ServiceSpec::new("s")
            .version("v1", VersionSpec::new(echo()))
            .version("v2", VersionSpec::new(echo()).with_fitting(echo()));
        assert!(spec.endpoint("v1", EndpointKind::Request).is_ok());
        assert!(matches!(
            spec.endpoint("v1", EndpointKind::FitParameters),
            Err(RouteError::UnsupportedEndpoint { .. })
        ));
        assert!(spec.endpoint("v2", EndpointKind::FitParameters).is_ok());
        assert_eq!(spec.endpoint("v3", EndpointKind::Request).unwrap_err(), RouteError::UnknownVersion("v3".into()));
        assert!(matches!(spec.endpoint("latest", EndpointKind::Request), Err(RouteError::UnknownVersion(_))));
        assert_eq!(spec.only("v2").unwrap().versions().count(), 1);
        assert!(spec.only("v7").is_none());
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(ServiceSpec::new("empty").check(), Err(SpecError::NoVersions(_))));
        let bad = Endpoint::new(
            SchemaNode::number().minimum(1.0).maximum(0.0),
            SchemaNode::boolean(),
            |_: &Value, _: &Progress| Ok(json!(true)),
        );
        let spec = ServiceSpec::new("s").version("v1", VersionSpec::new(bad));
        assert!(matches!(spec.check(), Err(SpecError::Schema { side: "input", .. })));
    }

    #[test]
    fn progress_reports_reach_the_callback() {
        let count = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c = count.clone();
        let p = Progress::new(move || {
            c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        });
        p.report();
        p.clone().report();
        Progress::noop().report();
        assert_eq!(count.load(std::sync::atomic::Ordering::SeqCst), 2);
    }
}
