use serde_json::{json, Map, Value};

use super::{NodeKind, SchemaNode, StringFormat};
use crate::service::{ServiceSpec, SpecError};
use crate::task::{EndpointKind, VersionTag};

/// Extension keyword carrying [`SchemaNode::strictly_increasing`]. Plain JSON
/// Schema has no way to express ordering between array items.
pub const INCREASING_KEYWORD: &str = "x-strictly-increasing";

const BEARER: &str = "bearerAuth";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DocOptions {
    /// Declare the bearer-token security scheme.
    pub auth_enabled: bool,
    /// Whether `/{version}/openapi.json` is reachable without a token.
    pub docs_exempt: bool,
}

impl Default for DocOptions {
    fn default() -> Self {
        DocOptions { auth_enabled: false, docs_exempt: true }
    }
}

/// Whole numbers are written as JSON integers so bounds read `0`, not `0.0`.
fn number(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        Value::from(x as i64)
    } else {
        Value::from(x)
    }
}

/// Maps a node onto an equivalent JSON Schema (2020-12) fragment.
pub fn translate_node(node: &SchemaNode) -> Value {
    let mut out = Map::new();
    let base = match &node.kind {
        NodeKind::Object { .. } => "object",
        NodeKind::Array { .. } => "array",
        NodeKind::String { .. } | NodeKind::Enum(_) => "string",
        NodeKind::Number { .. } => "number",
        NodeKind::Integer { .. } => "integer",
        NodeKind::Boolean => "boolean",
    };
    out.insert("type".into(), if node.nullable { json!([base, "null"]) } else { json!(base) });

    match &node.kind {
        NodeKind::Object { fields, required } => {
            let properties: Map<String, Value> =
                fields.iter().map(|(name, child)| (name.clone(), translate_node(child))).collect();
            out.insert("properties".into(), Value::Object(properties));
            if !required.is_empty() {
                // Field declaration order, independent of how `required` was built.
                let ordered: Vec<&String> =
                    fields.iter().map(|(name, _)| name).filter(|name| required.contains(name)).collect();
                out.insert("required".into(), json!(ordered));
            }
            out.insert("additionalProperties".into(), json!(false));
        }
        NodeKind::Array { item, min_items, max_items, increasing } => {
            out.insert("items".into(), translate_node(item));
            if let Some(n) = min_items {
                out.insert("minItems".into(), json!(n));
            }
            if let Some(n) = max_items {
                out.insert("maxItems".into(), json!(n));
            }
            if let Some(ptr) = increasing {
                out.insert(INCREASING_KEYWORD.into(), json!(ptr));
            }
        }
        NodeKind::String { format, pattern } => {
            if let Some(StringFormat::DateTime) = format {
                out.insert("format".into(), json!("date-time"));
            }
            if let Some(p) = pattern {
                out.insert("pattern".into(), json!(p.as_str()));
            }
        }
        NodeKind::Number { minimum, maximum } => {
            if let Some(m) = minimum {
                out.insert("minimum".into(), number(*m));
            }
            if let Some(m) = maximum {
                out.insert("maximum".into(), number(*m));
            }
        }
        NodeKind::Integer { minimum, maximum } => {
            if let Some(m) = minimum {
                out.insert("minimum".into(), json!(m));
            }
            if let Some(m) = maximum {
                out.insert("maximum".into(), json!(m));
            }
        }
        NodeKind::Boolean => {}
        NodeKind::Enum(values) => {
            let mut list: Vec<Value> = values.iter().map(|v| json!(v)).collect();
            if node.nullable {
                list.push(Value::Null);
            }
            out.insert("enum".into(), Value::Array(list));
        }
    }

    if let Some(d) = &node.description {
        out.insert("description".into(), json!(d));
    }
    if let Some(e) = &node.example {
        out.insert("example".into(), e.clone());
    }
    Value::Object(out)
}

fn schema_ref(name: &str) -> Value {
    json!({ "$ref": format!("#/components/schemas/{name}") })
}

fn json_body(description: &str, schema: Value) -> Value {
    json!({
        "description": description,
        "content": { "application/json": { "schema": schema } }
    })
}

fn component_name(single: bool, version: &VersionTag, base: &str) -> String {
    if single {
        base.to_owned()
    } else {
        format!("{version}.{base}")
    }
}

fn kind_names(kind: EndpointKind) -> (&'static str, &'static str, &'static str) {
    match kind {
        EndpointKind::Request => ("RequestInput", "RequestOutput", "request"),
        EndpointKind::FitParameters => ("FitInput", "FitOutput", "fit_parameters"),
    }
}

/// Builds the OpenAPI 3.1 document describing every version of `spec`.
///
/// Per version and supported endpoint kind the document has a submit path
/// plus status and result paths, and one `openapi.json` path per version.
/// Component schemas are named `RequestInput`, `FitOutput`, … when the
/// document describes a single version and `v2.RequestInput`, … otherwise.
/// Output is deterministic: identical specs produce byte-identical JSON.
pub fn emit_openapi(spec: &ServiceSpec, options: &DocOptions) -> Result<Value, SpecError> {
    spec.check()?;
    let single = spec.versions().count() == 1;
    let tags: Vec<&str> = spec.versions().map(|(v, _)| v.as_str()).collect();

    let error_responses = |codes: &[(&str, &str)]| -> Map<String, Value> {
        let mut out = Map::new();
        for (code, text) in codes {
            out.insert((*code).into(), json_body(text, schema_ref("ApiError")));
        }
        if options.auth_enabled {
            out.insert("401".into(), json_body("Missing, expired or invalid bearer token", schema_ref("ApiError")));
            out.insert("403".into(), json_body("Token lacks a required claim", schema_ref("ApiError")));
        }
        out
    };
    let task_param = json!([{
        "name": "task_ID",
        "in": "path",
        "required": true,
        "description": "ID returned when the task was submitted.",
        "schema": { "type": "string", "format": "uuid" }
    }]);

    let mut paths = Map::new();
    let mut schemas = Map::new();
    for (version, v) in spec.versions() {
        for kind in EndpointKind::ALL {
            let Some(endpoint) = v.endpoint(kind) else { continue };
            let (input_name, output_name, op) = kind_names(kind);
            let input_name = component_name(single, version, input_name);
            let output_name = component_name(single, version, output_name);
            schemas.insert(input_name.clone(), translate_node(&endpoint.input));
            schemas.insert(output_name.clone(), translate_node(&endpoint.output));

            let base = format!("/{version}/{}", kind.as_str());
            let mut responses = Map::new();
            responses.insert("201".into(), json_body("Task accepted and queued", schema_ref("TaskCreated")));
            responses.extend(error_responses(&[
                ("404", "Unknown version or endpoint"),
                ("413", "Request body too large"),
                ("422", "Input failed validation"),
                ("503", "Message broker unavailable"),
            ]));
            paths.insert(
                format!("{base}/"),
                json!({ "post": {
                    "tags": [version.as_str()],
                    "summary": format!("Submit a {} task", kind.as_str()),
                    "operationId": format!("{version}_{op}_submit"),
                    "requestBody": {
                        "required": true,
                        "content": { "application/json": { "schema": schema_ref(&input_name) } }
                    },
                    "responses": responses
                }}),
            );

            let mut responses = Map::new();
            responses.insert("200".into(), json_body("Current task status", schema_ref("TaskStatus")));
            responses.extend(error_responses(&[("404", "Unknown task")]));
            paths.insert(
                format!("{base}/{{task_ID}}/status/"),
                json!({ "get": {
                    "tags": [version.as_str()],
                    "summary": format!("Status of a {} task", kind.as_str()),
                    "operationId": format!("{version}_{op}_status"),
                    "parameters": task_param,
                    "responses": responses
                }}),
            );

            let mut responses = Map::new();
            responses.insert("200".into(), json_body("Task finished successfully", schema_ref(&output_name)));
            responses.extend(error_responses(&[
                ("404", "Unknown task"),
                ("409", "Result not ready yet"),
                ("500", "Task failed"),
            ]));
            paths.insert(
                format!("{base}/{{task_ID}}/result/"),
                json!({ "get": {
                    "tags": [version.as_str()],
                    "summary": format!("Result of a {} task", kind.as_str()),
                    "operationId": format!("{version}_{op}_result"),
                    "parameters": task_param,
                    "responses": responses
                }}),
            );
        }

        let mut docs = json!({
            "tags": [version.as_str()],
            "summary": "This OpenAPI document",
            "operationId": format!("{version}_openapi"),
            "responses": {
                "200": json_body("OpenAPI document for this version", json!({ "type": "object" })),
                "404": json_body("Unknown version", schema_ref("ApiError"))
            }
        });
        if options.auth_enabled && options.docs_exempt {
            docs["security"] = json!([]);
        }
        paths.insert(format!("/{version}/openapi.json"), json!({ "get": docs }));
    }

    schemas.insert(
        "TaskCreated".into(),
        json!({
            "type": "object",
            "properties": { "task_ID": { "type": "string", "format": "uuid" } },
            "required": ["task_ID"],
            "additionalProperties": false
        }),
    );
    let status = SchemaNode::object().field(
        "status",
        SchemaNode::enumeration(["queued", "running", "ready"])
            .describe("`ready` means the result endpoint can be called; it does not imply success."),
    );
    schemas.insert("TaskStatus".into(), translate_node(&status));
    schemas.insert(
        "ApiError".into(),
        json!({
            "type": "object",
            "properties": {
                "detail": {
                    "oneOf": [
                        { "type": "string" },
                        {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "properties": {
                                    "loc": { "type": "string", "description": "JSON pointer into the payload" },
                                    "msg": { "type": "string" }
                                },
                                "required": ["loc", "msg"]
                            }
                        }
                    ]
                }
            },
            "required": ["detail"]
        }),
    );

    let mut info = Map::new();
    info.insert("title".into(), json!(spec.name()));
    info.insert("version".into(), json!(tags.join(", ")));
    if let Some(d) = spec.description() {
        info.insert("description".into(), json!(d));
    }

    let mut components = Map::new();
    components.insert("schemas".into(), Value::Object(schemas));
    let mut doc = Map::new();
    doc.insert("openapi".into(), json!("3.1.0"));
    doc.insert("info".into(), Value::Object(info));
    doc.insert("paths".into(), Value::Object(paths));
    if options.auth_enabled {
        components.insert(
            "securitySchemes".into(),
            json!({ BEARER: { "type": "http", "scheme": "bearer", "bearerFormat": "JWT" } }),
        );
        doc.insert("security".into(), json!([{ BEARER: [] }]));
    }
    doc.insert("components".into(), Value::Object(components));
    Ok(Value::Object(doc))
}
