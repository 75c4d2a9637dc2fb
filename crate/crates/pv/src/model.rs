//! Clear-sky proxy model: generation follows a half sine between sunrise and
//! sunset, scaled by a single user-specific peak power.

use std::f64::consts::PI;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PvError {
    #[error("sunset must be after sunrise")]
    EmptyDaylight,
    #[error("all measurements outside daylight window")]
    DegenerateFit,
}

/// Normalised generation profile of one day, `sin(π·(t−sunrise)/(sunset−sunrise))`
/// inside the daylight window and zero outside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClearSkyShape {
    sunrise: DateTime<Utc>,
    sunset: DateTime<Utc>,
}

impl ClearSkyShape {
    pub fn new(sunrise: DateTime<Utc>, sunset: DateTime<Utc>) -> Result<Self, PvError> {
        if sunset <= sunrise {
            return Err(PvError::EmptyDaylight);
        }
        Ok(ClearSkyShape { sunrise, sunset })
    }

    pub fn sunrise(&self) -> DateTime<Utc> {
        self.sunrise
    }

    pub fn sunset(&self) -> DateTime<Utc> {
        self.sunset
    }

    /// Value in `[0, 1]`; exactly 0 at and outside sunrise/sunset and exactly
    /// 1 at the midpoint.
    pub fn value(&self, t: DateTime<Utc>) -> f64 {
        if t <= self.sunrise || t >= self.sunset {
            return 0.0;
        }
        let fraction = seconds(t - self.sunrise) / seconds(self.sunset - self.sunrise);
        (PI * fraction).sin().clamp(0.0, 1.0)
    }
}

fn seconds(d: chrono::Duration) -> f64 {
    match d.num_nanoseconds() {
        Some(ns) => ns as f64 * 1e-9,
        None => d.num_milliseconds() as f64 * 1e-3,
    }
}

/// Shape value at `t` for the window `[sunrise, sunset]`.
pub fn shape_value(t: DateTime<Utc>, sunrise: DateTime<Utc>, sunset: DateTime<Utc>) -> Result<f64, PvError> {
    Ok(ClearSkyShape::new(sunrise, sunset)?.value(t))
}

/// User-specific parameters of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvParameters {
    pub peak_power_kw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    #[serde(with = "crate::wire_time")]
    pub time: DateTime<Utc>,
    pub value: Option<f64>,
}

/// Ordered measurement or forecast series.
pub type TimeSeries = Vec<Point>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakPowerFit {
    pub parameters: PvParameters,
    pub residual_rms_kw: f64,
}

/// Least-squares scale `p` minimising `Σ (mᵢ − p·sᵢ)²` over `(sᵢ, mᵢ)` pairs,
/// clamped to `p ≥ 0`, together with the RMS residual at that `p`.
pub fn fit_scale(points: &[(f64, f64)]) -> Result<(f64, f64), PvError> {
    let (cross, energy) = points.iter().fold((0.0, 0.0), |(c, e), (s, m)| (c + m * s, e + s * s));
    if points.is_empty() || energy == 0.0 {
        return Err(PvError::DegenerateFit);
    }
    let p = (cross / energy).max(0.0);
    let sse: f64 = points.iter().map(|(s, m)| (m - p * s).powi(2)).sum();
    Ok((p, (sse / points.len() as f64).sqrt()))
}

/// Fits the peak power to measurements; gaps (`null` values) are skipped.
pub fn fit_peak_power(measurements: &[Point], shape: &ClearSkyShape) -> Result<PeakPowerFit, PvError> {
    let points: Vec<(f64, f64)> =
        measurements.iter().filter_map(|pt| pt.value.map(|m| (shape.value(pt.time), m))).collect();
    let (p, rms) = fit_scale(&points)?;
    Ok(PeakPowerFit { parameters: PvParameters { peak_power_kw: p }, residual_rms_kw: rms })
}

pub fn forecast(params: &PvParameters, shape: &ClearSkyShape, times: &[DateTime<Utc>]) -> TimeSeries {
    times
        .iter()
        .map(|&time| Point { time, value: Some(params.peak_power_kw * shape.value(time)) })
        .collect()
}

#[cfg(test)]
mod tests {
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;

    fn at(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, h, m, 0).unwrap()
    }

    fn day() -> ClearSkyShape {
        ClearSkyShape::new(at(6, 0), at(18, 0)).unwrap()
    }

    #[test]
    fn shape_landmarks() {
        let s = day();
        assert_eq!(s.value(at(12, 0)), 1.0);
        assert_eq!(s.value(at(6, 0)), 0.0);
        assert_eq!(s.value(at(18, 0)), 0.0);
        assert_eq!(s.value(at(3, 0)), 0.0);
        assert_eq!(s.value(at(21, 0)), 0.0);
        // Independent evaluation of sin(π/4); the two f64 routes differ by one ulp.
        let expected = (0.5f64).sqrt();
        assert!((s.value(at(9, 0)) - expected).abs() <= 2.0 * f64::EPSILON);
        assert!(matches!(shape_value(at(9, 0), at(18, 0), at(6, 0)), Err(PvError::EmptyDaylight)));
    }

    #[test]
    fn forecast_examples() {
        let s = day();
        let two = PvParameters { peak_power_kw: 2.0 };
        let out = forecast(&two, &s, &[at(5, 0), at(12, 0)]);
        assert_eq!(out[0].value, Some(0.0));
        assert_eq!(out[1].value, Some(2.0));
        let out = forecast(&PvParameters { peak_power_kw: 1.5 }, &s, &[at(9, 0)]);
        assert!((out[0].value.unwrap() - 1.5 * (0.5f64).sqrt()).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn worked_fit_example_is_exact() {
        let pts = [(0.0, 0.0), (0.5, 1.0), (1.0, 2.0), (0.5, 1.0)];
        assert_eq!(fit_scale(&pts).unwrap(), (2.0, 0.0));
    }

    #[test]
    fn worked_fit_matches_grid_search() {
        let pts = [(0.0, 0.0), (0.5, 1.0), (1.0, 2.0), (0.5, 1.0)];
        let sse = |p: f64| pts.iter().map(|(s, m)| (m - p * s).powi(2)).sum::<f64>();
        let best = (0..=100_000).map(|i| i as f64 * 1e-4).min_by(|a, b| sse(*a).total_cmp(&sse(*b))).unwrap();
        assert!((fit_scale(&pts).unwrap().0 - best).abs() < 1e-4);
    }

    #[test]
    fn zero_signal_and_degenerate_inputs() {
        let s = day();
        let zeros: Vec<Point> = (7..17).map(|h| Point { time: at(h, 0), value: Some(0.0) }).collect();
        assert_eq!(fit_peak_power(&zeros, &s).unwrap().parameters.peak_power_kw, 0.0);

        let night: Vec<Point> = [2, 4, 20].iter().map(|&h| Point { time: at(h, 0), value: Some(1.0) }).collect();
        assert_eq!(fit_peak_power(&night, &s), Err(PvError::DegenerateFit));
        let gaps: Vec<Point> = (7..17).map(|h| Point { time: at(h, 0), value: None }).collect();
        assert_eq!(fit_peak_power(&gaps, &s), Err(PvError::DegenerateFit));
        assert_eq!(fit_peak_power(&[], &s), Err(PvError::DegenerateFit));
    }

    #[test]
    fn negative_correlation_clamps_to_zero() {
        let (p, rms) = fit_scale(&[(1.0, -2.0), (0.5, -1.0)]).unwrap();
        assert_eq!(p, 0.0);
        assert!((rms - (2.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_data_at_97_times() {
        let s = day();
        let times: Vec<_> = (0..97).map(|i| at(6, 0) + Duration::minutes(i * 15 / 2)).collect();
        let data: Vec<Point> = times.iter().map(|&t| Point { time: t, value: Some(3.0 * s.value(t)) }).collect();
        let fit = fit_peak_power(&data, &s).unwrap();
        assert!((fit.parameters.peak_power_kw - 3.0).abs() <= 1e-12);
        assert!(fit.residual_rms_kw <= 1e-12);
    }

    #[test]
    fn gaps_are_skipped() {
        let s = day();
        let mut data: Vec<Point> = (7..17).map(|h| Point { time: at(h, 0), value: Some(4.0 * s.value(at(h, 0))) }).collect();
        data[3].value = None;
        data[5].value = None;
        let fit = fit_peak_power(&data, &s).unwrap();
        assert!((fit.parameters.peak_power_kw - 4.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_fit_is_stationary() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let s = day();
        for _ in 0..50 {
            let p_true = rng.gen_range(0.5..8.0);
            let pts: Vec<(f64, f64)> = (0..48)
                .map(|i| {
                    let sv = s.value(at(6, 0) + Duration::minutes(i * 15));
                    (sv, p_true * sv + rng.gen_range(-0.3..0.3))
                })
                .collect();
            let sse = |p: f64| pts.iter().map(|(s, m)| (m - p * s).powi(2)).sum::<f64>();
            let (p, _) = fit_scale(&pts).unwrap();
            assert!(sse(p) <= sse(p + 1e-6));
            assert!(sse(p) <= sse(p - 1e-6));
        }
    }

    proptest! {
        #[test]
        fn scale_equivariance(p in 0.0f64..50.0, k in 0.0f64..20.0, minutes in proptest::collection::vec(0i64..1440, 1..30)) {
            let s = day();
            let times: Vec<_> = minutes.iter().map(|&m| at(0, 0) + Duration::minutes(m)).collect();
            let base = forecast(&PvParameters { peak_power_kw: p }, &s, &times);
            let scaled = forecast(&PvParameters { peak_power_kw: k * p }, &s, &times);
            for (a, b) in base.iter().zip(&scaled) {
                let (a, b) = (a.value.unwrap(), b.value.unwrap());
                prop_assert!(a >= 0.0);
                // k·(p·s) and (k·p)·s may differ by rounding only.
                prop_assert!((k * a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1e-300));
            }
        }

        #[test]
        fn fit_recovers_noiseless_parameter(p in 0.01f64..100.0, n in 2usize..200) {
            let s = day();
            let times: Vec<_> = (0..n).map(|i| at(6, 1) + Duration::seconds((i as i64) * 43_000 / n as i64)).collect();
            let data = forecast(&PvParameters { peak_power_kw: p }, &s, &times);
            let fit = fit_peak_power(&data, &s).unwrap();
            prop_assert!(((fit.parameters.peak_power_kw - p) / p).abs() <= 1e-9);
        }
    }
}
