//! Settings resolution. A value comes from the command line flag, else the
//! `ESG_*` environment variable (both handled by clap), else the TOML file,
//! else the built-in default.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

/// Keys accepted in the TOML file. Each mirrors a flag of the same name
/// with dashes, and an environment variable `ESG_<KEY>`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub broker_url: Option<String>,
    pub namespace: Option<String>,
    pub bind_addr: Option<String>,
    pub body_limit_bytes: Option<usize>,

    pub auth_enabled: Option<bool>,
    pub auth_jwks_url: Option<String>,
    pub auth_jwks_refresh_s: Option<f64>,
    pub auth_public_keys: Option<Vec<PathBuf>>,
    pub auth_issuers: Option<Vec<String>>,
    pub auth_audience: Option<String>,
    pub auth_required_claim: Option<String>,
    pub auth_algorithms: Option<Vec<String>>,
    pub auth_clock_skew_s: Option<f64>,
    pub docs_require_auth: Option<bool>,

    pub worker_id: Option<String>,
    pub worker_visibility_s: Option<f64>,
    pub worker_heartbeat_s: Option<f64>,
    pub worker_grace_s: Option<f64>,
    pub worker_max_runtime_s: Option<f64>,

    pub gc_retain_after_fetch_s: Option<f64>,
    pub gc_absolute_ttl_s: Option<f64>,
    pub gc_interval_s: Option<f64>,

    pub store_password: Option<String>,

    pub base_url: Option<String>,
    pub token: Option<String>,
    pub max_wait_s: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config file {}: {e}", path.display()))
    }
}

/// First of command line/environment, file, default.
pub fn pick<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}

/// Like [`pick`] for lists, where an empty command line list means unset.
pub fn pick_list<T>(cli: Vec<T>, file: Option<Vec<T>>) -> Vec<T> {
    if cli.is_empty() {
        file.unwrap_or_default()
    } else {
        cli
    }
}

pub fn seconds(name: &str, value: f64) -> Result<Duration, String> {
    Duration::try_from_secs_f64(value).map_err(|_| format!("{name} must be a non-negative number of seconds, got {value}"))
}
