//! Reusable building blocks for service data models.

use serde_json::json;

use super::SchemaNode;

/// `{"latitude": [-90, 90], "longitude": [-180, 180]}` in degrees.
pub fn geographic_position() -> SchemaNode {
    SchemaNode::object()
        .field(
            "latitude",
            SchemaNode::number().minimum(-90.0).maximum(90.0).describe("Latitude in degrees, WGS 84."),
        )
        .field(
            "longitude",
            SchemaNode::number().minimum(-180.0).maximum(180.0).describe("Longitude in degrees, WGS 84."),
        )
        .describe("A geographic position.")
        .example(json!({"latitude": 49.01, "longitude": 8.40}))
}

pub fn utc_timestamp() -> SchemaNode {
    SchemaNode::date_time().describe("RFC 3339 date-time; emitted in UTC with a trailing Z.")
}

/// A time series: `[{"time": ..., "value": ...}, ...]` with strictly
/// increasing times. `null` values mark gaps.
pub fn value_message_list() -> SchemaNode {
    let message = SchemaNode::object()
        .field("time", utc_timestamp())
        .field("value", SchemaNode::number().nullable().describe("Value at `time`; null marks a gap."));
    SchemaNode::array(message)
        .strictly_increasing("/time")
        .describe("Time series of values, ordered by strictly increasing time.")
        .example(json!([
            {"time": "2024-06-01T10:00:00.000Z", "value": 1.2},
            {"time": "2024-06-01T10:15:00.000Z", "value": null}
        ]))
}
