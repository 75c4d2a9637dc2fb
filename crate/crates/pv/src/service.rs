//! Data models and handlers of the `pv-forecast` service.

use chrono::{DateTime, Utc};
use esg_core::schema::{geographic_position, utc_timestamp, value_message_list, SchemaNode};
use esg_core::service::{Endpoint, HandlerError, Progress, ServiceSpec, VersionSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::model::{fit_peak_power, forecast, ClearSkyShape, Point, PvParameters};

pub const SERVICE_NAME: &str = "pv-forecast";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInput {
    pub position: Position,
    #[serde(with = "crate::wire_time")]
    pub sunrise: DateTime<Utc>,
    #[serde(with = "crate::wire_time")]
    pub sunset: DateTime<Utc>,
    pub measurements: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub parameters: PvParameters,
    pub residual_rms_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestInput {
    pub position: Position,
    #[serde(with = "crate::wire_time")]
    pub sunrise: DateTime<Utc>,
    #[serde(with = "crate::wire_time")]
    pub sunset: DateTime<Utc>,
    pub parameters: PvParameters,
    #[serde(with = "crate::wire_time::list")]
    pub times: Vec<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutput {
    pub forecast: Vec<Point>,
}

pub fn parameters_schema() -> SchemaNode {
    SchemaNode::object()
        .field(
            "peak_power_kw",
            SchemaNode::number().minimum(0.0).describe("Fitted peak power of the PV system in kW."),
        )
        .describe("User-specific parameters as returned by /fit-parameters/. Store them locally.")
        .example(json!({"peak_power_kw": 4.2}))
}

fn sun_times() -> (SchemaNode, SchemaNode) {
    (
        utc_timestamp().describe("Sunrise of the forecast day.").example(json!("2024-06-01T04:20:00.000Z")),
        utc_timestamp().describe("Sunset of the forecast day.").example(json!("2024-06-01T19:30:00.000Z")),
    )
}

pub fn fit_input_schema() -> SchemaNode {
    let (sunrise, sunset) = sun_times();
    SchemaNode::object()
        .field("position", geographic_position())
        .field("sunrise", sunrise)
        .field("sunset", sunset)
        .field(
            "measurements",
            value_message_list().min_items(1).describe("Historic generation measurements in kW."),
        )
        .describe("Historic measurements of one PV system used to fit its peak power.")
}

pub fn fit_output_schema() -> SchemaNode {
    SchemaNode::object()
        .field("parameters", parameters_schema())
        .field(
            "residual_rms_kw",
            SchemaNode::number().minimum(0.0).describe("Root mean square residual of the fit in kW."),
        )
}

pub fn request_input_schema() -> SchemaNode {
    let (sunrise, sunset) = sun_times();
    SchemaNode::object()
        .field("position", geographic_position())
        .field("sunrise", sunrise)
        .field("sunset", sunset)
        .field("parameters", parameters_schema())
        .field(
            "times",
            SchemaNode::array(utc_timestamp())
                .strictly_increasing("")
                .describe("Points in time to forecast, strictly increasing.")
                .example(json!(["2024-06-01T12:00:00.000Z", "2024-06-01T12:15:00.000Z"])),
        )
        .describe("Forecast request. The position is validated but not used by the clear-sky proxy model.")
}

pub fn request_output_schema() -> SchemaNode {
    SchemaNode::object()
        .field("forecast", value_message_list().describe("Forecast generation in kW."))
}

fn decode<T: for<'de> Deserialize<'de>>(input: &Value) -> Result<T, HandlerError> {
    serde_json::from_value(input.clone()).map_err(|e| HandlerError::new(format!("malformed input: {e}")))
}

fn encode<T: Serialize>(output: &T) -> Result<Value, HandlerError> {
    serde_json::to_value(output).map_err(|e| HandlerError::new(e.to_string()))
}

pub fn handle_fit(input: &Value, _progress: &Progress) -> Result<Value, HandlerError> {
    let input: FitInput = decode(input)?;
    let shape = ClearSkyShape::new(input.sunrise, input.sunset).map_err(|e| HandlerError::new(e.to_string()))?;
    let fit = fit_peak_power(&input.measurements, &shape).map_err(|e| HandlerError::new(e.to_string()))?;
    encode(&FitOutput { parameters: fit.parameters, residual_rms_kw: fit.residual_rms_kw })
}

pub fn handle_request(input: &Value, _progress: &Progress) -> Result<Value, HandlerError> {
    let input: RequestInput = decode(input)?;
    let shape = ClearSkyShape::new(input.sunrise, input.sunset).map_err(|e| HandlerError::new(e.to_string()))?;
    encode(&RequestOutput { forecast: forecast(&input.parameters, &shape, &input.times) })
}

/// The service definition: version `v1` with fitting support.
pub fn pv_service() -> ServiceSpec {
    let v1 = VersionSpec::new(Endpoint::new(request_input_schema(), request_output_schema(), handle_request))
        .with_fitting(Endpoint::new(fit_input_schema(), fit_output_schema(), handle_fit));
    ServiceSpec::new(SERVICE_NAME)
        .describe(
            "Forecast of PV power generation. Generation follows a half-sine clear-sky profile between the \
             given sunrise and sunset, scaled by a user-specific peak power that /fit-parameters/ estimates \
             from historic measurements by least squares.",
        )
        .version("v1", v1)
}
