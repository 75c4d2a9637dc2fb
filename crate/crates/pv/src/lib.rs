//! Reference service for the gateway framework: PV generation forecasts
//! with a user-specific peak power fitted from historic measurements.

pub mod model;
pub mod service;

pub use model::{fit_peak_power, fit_scale, forecast, shape_value, ClearSkyShape, Point, PvError, PvParameters};
pub use service::{pv_service, SERVICE_NAME};

/// Timestamps of this service's payloads. Parsing accepts any RFC 3339
/// date-time; output is UTC with a trailing `Z` and only as many fractional
/// digits as needed, so distinct input instants stay distinct.
pub(crate) mod wire_time {
    use chrono::{DateTime, SecondsFormat, Utc};
    use esg_core::schema::parse_date_time;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::AutoSi, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let text = String::deserialize(d)?;
        parse_date_time(&text).ok_or_else(|| de::Error::custom(format!("invalid RFC 3339 date-time {text:?}")))
    }

    pub mod list {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(ts: &[DateTime<Utc>], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(ts.len()))?;
            for t in ts {
                seq.serialize_element(&t.to_rfc3339_opts(SecondsFormat::AutoSi, true))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DateTime<Utc>>, D::Error> {
            Vec::<String>::deserialize(d)?
                .into_iter()
                .map(|text| {
                    parse_date_time(&text)
                        .ok_or_else(|| de::Error::custom(format!("invalid RFC 3339 date-time {text:?}")))
                })
                .collect()
        }
    }
}
