use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::datetime::parse_date_time;
use super::{NodeKind, SchemaNode, StringFormat};

/// Upper bound on the number of issues collected for one payload.
pub const MAX_ISSUES: usize = 100;

/// One problem found in a payload, located by JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub loc: String,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidationErrors(pub Vec<ValidationIssue>);

impl ValidationErrors {
    pub fn issues(&self) -> &[ValidationIssue] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            let loc = if issue.loc.is_empty() { "/" } else { &issue.loc };
            write!(f, "{loc}: {}", issue.msg)?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

/// Checks `payload` against `schema`, collecting every issue (up to
/// [`MAX_ISSUES`]) rather than stopping at the first.
pub fn validate(schema: &SchemaNode, payload: &Value) -> Result<(), ValidationErrors> {
    let mut v = Validator { issues: Vec::new() };
    v.node(schema, payload, &mut String::new());
    if v.issues.is_empty() {
        Ok(())
    } else {
        Err(ValidationErrors(v.issues))
    }
}

pub(crate) fn escape_pointer(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

struct Validator {
    issues: Vec<ValidationIssue>,
}

impl Validator {
    fn full(&self) -> bool {
        self.issues.len() >= MAX_ISSUES
    }

    fn report(&mut self, loc: &str, msg: impl Into<String>) {
        if !self.full() {
            self.issues.push(ValidationIssue { loc: loc.to_owned(), msg: msg.into() });
        }
    }

    fn node(&mut self, schema: &SchemaNode, value: &Value, loc: &mut String) {
        if self.full() {
            return;
        }
        if value.is_null() {
            if !schema.nullable {
                self.report(loc, format!("expected {}, got null", type_name(&schema.kind)));
            }
            return;
        }
        match &schema.kind {
            NodeKind::Object { fields, required } => {
                let Some(map) = value.as_object() else {
                    return self.mismatch(loc, "object", value);
                };
                for name in required {
                    if !map.contains_key(name) {
                        let at = format!("{loc}/{}", escape_pointer(name));
                        self.report(&at, "field required");
                    }
                }
                for (key, child) in map {
                    let len = loc.len();
                    loc.push('/');
                    loc.push_str(&escape_pointer(key));
                    match fields.iter().find(|(name, _)| name == key) {
                        Some((_, node)) => self.node(node, child, loc),
                        None => self.report(loc, "unknown field"),
                    }
                    loc.truncate(len);
                }
            }
            NodeKind::Array { item, min_items, max_items, increasing } => {
                let Some(items) = value.as_array() else {
                    return self.mismatch(loc, "array", value);
                };
                if let Some(min) = min_items {
                    if items.len() < *min {
                        self.report(loc, format!("at least {min} items required"));
                    }
                }
                if let Some(max) = max_items {
                    if items.len() > *max {
                        self.report(loc, format!("at most {max} items allowed"));
                    }
                }
                for (i, child) in items.iter().enumerate() {
                    let len = loc.len();
                    loc.push('/');
                    loc.push_str(&i.to_string());
                    self.node(item, child, loc);
                    loc.truncate(len);
                }
                if let Some(ptr) = increasing {
                    self.increasing(items, ptr, loc);
                }
            }
            NodeKind::String { format, pattern } => {
                let Some(text) = value.as_str() else {
                    return self.mismatch(loc, "string", value);
                };
                if *format == Some(StringFormat::DateTime) && parse_date_time(text).is_none() {
                    self.report(loc, "invalid RFC 3339 date-time");
                }
                if let Some(p) = pattern {
                    match p.regex() {
                        Ok(re) if re.is_match(text) => {}
                        _ => self.report(loc, format!("does not match pattern {:?}", p.as_str())),
                    }
                }
            }
            NodeKind::Number { minimum, maximum } => {
                let Some(x) = value.as_f64() else {
                    return self.mismatch(loc, "number", value);
                };
                self.bounds(loc, x, *minimum, *maximum);
            }
            NodeKind::Integer { minimum, maximum } => {
                let Some(x) = value.as_f64().filter(|x| x.fract() == 0.0) else {
                    return self.mismatch(loc, "integer", value);
                };
                self.bounds(loc, x, minimum.map(|m| m as f64), maximum.map(|m| m as f64));
            }
            NodeKind::Boolean => {
                if !value.is_boolean() {
                    self.mismatch(loc, "boolean", value);
                }
            }
            NodeKind::Enum(values) => match value.as_str() {
                Some(s) if values.iter().any(|v| v == s) => {}
                _ => self.report(loc, format!("must be one of {values:?}")),
            },
        }
    }

    fn bounds(&mut self, loc: &str, x: f64, minimum: Option<f64>, maximum: Option<f64>) {
        if let Some(max) = maximum {
            if x > max {
                self.report(loc, format!("maximum {max} exceeded"));
            }
        }
        if let Some(min) = minimum {
            if x < min {
                self.report(loc, format!("minimum {min} not reached"));
            }
        }
    }

    fn mismatch(&mut self, loc: &str, expected: &str, got: &Value) {
        self.report(loc, format!("expected {expected}, got {}", json_type(got)));
    }

    /// Reports each item whose key is not strictly greater than the previous
    /// item's. Pairs where either key is missing or of the wrong type are
    /// skipped; those are type errors reported elsewhere.
    fn increasing(&mut self, items: &[Value], ptr: &str, loc: &str) {
        let keys: Vec<Option<OrderKey>> = items.iter().map(|it| it.pointer(ptr).and_then(OrderKey::of)).collect();
        for (i, pair) in keys.windows(2).enumerate() {
            if let [Some(prev), Some(next)] = pair {
                if !matches!(prev.compare(next), Some(Ordering::Less)) {
                    self.report(&format!("{loc}/{}{ptr}", i + 1), "must be strictly greater than the previous item");
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum OrderKey {
    Number(f64),
    Instant(chrono::DateTime<chrono::Utc>),
}

impl OrderKey {
    fn of(value: &Value) -> Option<OrderKey> {
        match value {
            Value::Number(n) => n.as_f64().map(OrderKey::Number),
            Value::String(s) => parse_date_time(s).map(OrderKey::Instant),
            _ => None,
        }
    }

    fn compare(&self, other: &OrderKey) -> Option<Ordering> {
        match (self, other) {
            (OrderKey::Number(a), OrderKey::Number(b)) => a.partial_cmp(b),
            (OrderKey::Instant(a), OrderKey::Instant(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }
}

fn type_name(kind: &NodeKind) -> &'static str {
    match kind {
        NodeKind::Object { .. } => "object",
        NodeKind::Array { .. } => "array",
        NodeKind::String { .. } | NodeKind::Enum(_) => "string",
        NodeKind::Number { .. } => "number",
        NodeKind::Integer { .. } => "integer",
        NodeKind::Boolean => "boolean",
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}
