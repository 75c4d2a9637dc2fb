//! Declarative data models.
//!
//! A service provider describes the JSON accepted and produced by each
//! endpoint as a tree of [`SchemaNode`]s. The same tree drives request
//! validation ([`validate`]) and the published OpenAPI document
//! ([`emit_openapi`]), so documentation cannot drift from behaviour.
//!
//! ```
//! use esg_core::schema::{SchemaNode, validate};
//! use serde_json::json;
//!
//! let point = SchemaNode::object()
//!     .field("x", SchemaNode::number().minimum(0.0))
//!     .optional_field("label", SchemaNode::string());
//! assert!(validate(&point, &json!({"x": 1.5})).is_ok());
//! assert!(validate(&point, &json!({"x": -1})).is_err());
//! ```

mod blocks;
mod datetime;
mod openapi;
mod validate;

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

pub use blocks::{geographic_position, utc_timestamp, value_message_list};
pub use datetime::parse_date_time;
pub use openapi::{emit_openapi, translate_node, DocOptions, INCREASING_KEYWORD};
pub use validate::{validate, ValidationErrors, ValidationIssue, MAX_ISSUES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StringFormat {
    /// RFC 3339 date-time.
    DateTime,
}

/// A regular expression constraint, compiled on first use.
#[derive(Debug, Clone)]
pub struct Pattern {
    source: String,
    compiled: OnceLock<Result<Regex, String>>,
}

impl Pattern {
    pub fn new(source: impl Into<String>) -> Self {
        Pattern { source: source.into(), compiled: OnceLock::new() }
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn regex(&self) -> Result<&Regex, &str> {
        self.compiled
            .get_or_init(|| Regex::new(&self.source).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(String::as_str)
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Object {
        fields: Vec<(String, SchemaNode)>,
        required: Vec<String>,
    },
    Array {
        item: Box<SchemaNode>,
        min_items: Option<usize>,
        max_items: Option<usize>,
        /// JSON pointer, relative to each item, of a value that must strictly
        /// increase from one item to the next. `""` means the item itself.
        increasing: Option<String>,
    },
    String {
        format: Option<StringFormat>,
        pattern: Option<Pattern>,
    },
    Number {
        minimum: Option<f64>,
        maximum: Option<f64>,
    },
    Integer {
        minimum: Option<i64>,
        maximum: Option<i64>,
    },
    Boolean,
    Enum(Vec<String>),
}

/// One node of a data model.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaNode {
    pub kind: NodeKind,
    /// Whether JSON `null` is accepted in place of a value.
    pub nullable: bool,
    pub description: Option<String>,
    pub example: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid schema at {path:?}: {message}")]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl SchemaNode {
    fn of(kind: NodeKind) -> Self {
        SchemaNode { kind, nullable: false, description: None, example: None }
    }

    pub fn object() -> Self {
        Self::of(NodeKind::Object { fields: Vec::new(), required: Vec::new() })
    }

    pub fn array(item: SchemaNode) -> Self {
        Self::of(NodeKind::Array { item: Box::new(item), min_items: None, max_items: None, increasing: None })
    }

    pub fn string() -> Self {
        Self::of(NodeKind::String { format: None, pattern: None })
    }

    pub fn date_time() -> Self {
        Self::of(NodeKind::String { format: Some(StringFormat::DateTime), pattern: None })
    }

    pub fn number() -> Self {
        Self::of(NodeKind::Number { minimum: None, maximum: None })
    }

    pub fn integer() -> Self {
        Self::of(NodeKind::Integer { minimum: None, maximum: None })
    }

    pub fn boolean() -> Self {
        Self::of(NodeKind::Boolean)
    }

    pub fn enumeration<S: Into<String>>(values: impl IntoIterator<Item = S>) -> Self {
        Self::of(NodeKind::Enum(values.into_iter().map(Into::into).collect()))
    }

    /// Adds a required field. Panics if `self` is not an object.
    pub fn field(self, name: impl Into<String>, node: SchemaNode) -> Self {
        self.push_field(name.into(), node, true)
    }

    /// Adds a field that may be omitted. Panics if `self` is not an object.
    pub fn optional_field(self, name: impl Into<String>, node: SchemaNode) -> Self {
        self.push_field(name.into(), node, false)
    }

    fn push_field(mut self, name: String, node: SchemaNode, is_required: bool) -> Self {
        match &mut self.kind {
            NodeKind::Object { fields, required } => {
                if is_required {
                    required.push(name.clone());
                }
                fields.push((name, node));
            }
            other => panic!("field() on a non-object schema node: {other:?}"),
        }
        self
    }

    pub fn minimum(mut self, bound: f64) -> Self {
        match &mut self.kind {
            NodeKind::Number { minimum, .. } => *minimum = Some(bound),
            NodeKind::Integer { minimum, .. } => *minimum = Some(bound as i64),
            other => panic!("minimum() on a non-numeric schema node: {other:?}"),
        }
        self
    }

    pub fn maximum(mut self, bound: f64) -> Self {
        match &mut self.kind {
            NodeKind::Number { maximum, .. } => *maximum = Some(bound),
            NodeKind::Integer { maximum, .. } => *maximum = Some(bound as i64),
            other => panic!("maximum() on a non-numeric schema node: {other:?}"),
        }
        self
    }

    pub fn pattern(mut self, regex: impl Into<String>) -> Self {
        match &mut self.kind {
            NodeKind::String { pattern, .. } => *pattern = Some(Pattern::new(regex)),
            other => panic!("pattern() on a non-string schema node: {other:?}"),
        }
        self
    }

    pub fn min_items(mut self, n: usize) -> Self {
        match &mut self.kind {
            NodeKind::Array { min_items, .. } => *min_items = Some(n),
            other => panic!("min_items() on a non-array schema node: {other:?}"),
        }
        self
    }

    pub fn max_items(mut self, n: usize) -> Self {
        match &mut self.kind {
            NodeKind::Array { max_items, .. } => *max_items = Some(n),
            other => panic!("max_items() on a non-array schema node: {other:?}"),
        }
        self
    }

    /// Requires the value at `pointer` inside each item to strictly increase
    /// along the array. Comparable values are numbers and date-times.
    pub fn strictly_increasing(mut self, pointer: impl Into<String>) -> Self {
        match &mut self.kind {
            NodeKind::Array { increasing, .. } => *increasing = Some(pointer.into()),
            other => panic!("strictly_increasing() on a non-array schema node: {other:?}"),
        }
        self
    }

    pub fn nullable(mut self) -> Self {
        self.nullable = true;
        self
    }

    pub fn describe(mut self, text: impl Into<String>) -> Self {
        self.description = Some(text.into());
        self
    }

    pub fn example(mut self, value: Value) -> Self {
        self.example = Some(value);
        self
    }

    /// Verifies the structural invariants of this node and all its children.
    pub fn check(&self) -> Result<(), SchemaError> {
        self.check_at("")
    }

    fn check_at(&self, path: &str) -> Result<(), SchemaError> {
        let fail = |message: String| Err(SchemaError { path: path.to_owned(), message });
        match &self.kind {
            NodeKind::Object { fields, required } => {
                let mut names = HashSet::new();
                for (name, _) in fields {
                    if !names.insert(name.as_str()) {
                        return fail(format!("duplicate field {name:?}"));
                    }
                }
                if let Some(missing) = required.iter().find(|r| !names.contains(r.as_str())) {
                    return fail(format!("required name {missing:?} is not a field"));
                }
                for (name, node) in fields {
                    node.check_at(&format!("{path}/{}", validate::escape_pointer(name)))?;
                }
            }
            NodeKind::Array { item, min_items, max_items, increasing } => {
                if let (Some(lo), Some(hi)) = (min_items, max_items) {
                    if lo > hi {
                        return fail(format!("min_items {lo} > max_items {hi}"));
                    }
                }
                if let Some(ptr) = increasing {
                    if !ptr.is_empty() && !ptr.starts_with('/') {
                        return fail(format!("increasing key {ptr:?} is not a JSON pointer"));
                    }
                }
                item.check_at(&format!("{path}/items"))?;
            }
            NodeKind::String { pattern: Some(p), .. } => {
                if let Err(e) = p.regex() {
                    return fail(format!("bad pattern: {e}"));
                }
            }
            NodeKind::String { .. } | NodeKind::Boolean => {}
            NodeKind::Number { minimum, maximum } => {
                for b in [minimum, maximum].into_iter().flatten() {
                    if !b.is_finite() {
                        return fail("numeric bounds must be finite".into());
                    }
                }
                if let (Some(lo), Some(hi)) = (minimum, maximum) {
                    if lo > hi {
                        return fail(format!("minimum {lo} > maximum {hi}"));
                    }
                }
            }
            NodeKind::Integer { minimum, maximum } => {
                if let (Some(lo), Some(hi)) = (minimum, maximum) {
                    if lo > hi {
                        return fail(format!("minimum {lo} > maximum {hi}"));
                    }
                }
            }
            NodeKind::Enum(values) => {
                if values.is_empty() {
                    return fail("enum without values".into());
                }
                let distinct: HashSet<_> = values.iter().collect();
                if distinct.len() != values.len() {
                    return fail("enum values must be distinct".into());
                }
            }
        }
        if let Some(example) = &self.example {
            if let Err(errors) = validate(self, example) {
                return fail(format!("example does not validate: {errors}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn invariant_violations_are_reported() {
        let dup_enum = SchemaNode::enumeration(["a", "a"]);
        assert!(dup_enum.check().is_err());
        assert!(SchemaNode::enumeration(Vec::<String>::new()).check().is_err());
        assert!(SchemaNode::number().minimum(2.0).maximum(1.0).check().is_err());
        assert!(SchemaNode::integer().minimum(2.0).maximum(1.0).check().is_err());
        assert!(SchemaNode::array(SchemaNode::boolean()).min_items(3).max_items(2).check().is_err());
        assert!(SchemaNode::string().pattern("(").check().is_err());

        let mut obj = SchemaNode::object().field("a", SchemaNode::boolean());
        if let NodeKind::Object { required, .. } = &mut obj.kind {
            required.push("b".into());
        }
        let err = obj.check().unwrap_err();
        assert!(err.message.contains("\"b\""));
    }

    #[test]
    fn examples_must_validate() {
        let node = SchemaNode::object().field("x", SchemaNode::number().maximum(1.0)).example(json!({"x": 2}));
        assert!(node.check().is_err());
        let nested = SchemaNode::object().field("x", SchemaNode::boolean().example(json!(3)));
        assert_eq!(nested.check().unwrap_err().path, "/x");
        assert!(geographic_position().check().is_ok());
        assert!(value_message_list().check().is_ok());
    }
}
