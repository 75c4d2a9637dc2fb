//! The `esg` command: runs one process role of the gateway hosting the
//! reference PV forecast service, prints its API documentation, or calls a
//! running deployment.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use esg_broker::resp::StoreServer;
use esg_broker::{Broker, BrokerError, RespBroker};
use esg_client::{Client, ClientError, PollPolicy};
use esg_core::schema::{emit_openapi, DocOptions};
use esg_core::{Backoff, EndpointKind, ServiceSpec, VersionTag};
use esg_server::auth::{KeySource, VerificationKey};
use esg_server::{ApiConfig, ApiServer, ApiState, AuthPolicy, Authenticator, GcPolicy, Shutdown, Worker, WorkerConfig};
use jsonwebtoken::Algorithm;
use serde_json::Value;

pub mod config;

use config::{pick, pick_list, seconds, FileConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TASK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NO_VERDICT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "esg", version, about = "Energy service gateway: PV forecast reference deployment")]
pub struct Cli {
    /// TOML file with default settings; flags and ESG_* variables override it.
    #[arg(long, global = true, env = "ESG_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    ServeApi(ServeApi),
    /// Execute queued tasks.
    ServeWorker(ServeWorker),
    /// Delete task data that is no longer needed.
    ServeGc(ServeGc),
    /// Run the bundled RESP key-value store used as broker.
    ServeStore(ServeStore),
    /// Print the OpenAPI document of one API version.
    Openapi(Openapi),
    /// Submit a task to a running deployment.
    Submit(Submit),
}

#[derive(Debug, Args)]
pub struct BrokerArgs {
    /// RESP store URL, `redis://[:password@]host:port/db`.
    #[arg(long, env = "ESG_BROKER_URL")]
    pub broker_url: Option<String>,
    /// Prefix of every broker key.
    #[arg(long, env = "ESG_NAMESPACE")]
    pub namespace: Option<String>,
}

#[derive(Debug, Args)]
pub struct AuthArgs {
    #[arg(long, env = "ESG_AUTH_ENABLED", num_args = 0..=1, default_missing_value = "true")]
    pub auth_enabled: Option<bool>,
    #[arg(long, env = "ESG_AUTH_JWKS_URL")]
    pub auth_jwks_url: Option<String>,
    #[arg(long, env = "ESG_AUTH_JWKS_REFRESH_S")]
    pub auth_jwks_refresh_s: Option<f64>,
    /// PEM public keys, used instead of a JWKS URL.
    #[arg(long = "auth-public-key", env = "ESG_AUTH_PUBLIC_KEYS", value_delimiter = ',')]
    pub auth_public_keys: Vec<PathBuf>,
    #[arg(long = "auth-issuer", env = "ESG_AUTH_ISSUERS", value_delimiter = ',')]
    pub auth_issuers: Vec<String>,
    #[arg(long, env = "ESG_AUTH_AUDIENCE")]
    pub auth_audience: Option<String>,
    /// `name=value`; the claim must equal or contain the value.
    #[arg(long, env = "ESG_AUTH_REQUIRED_CLAIM")]
    pub auth_required_claim: Option<String>,
    #[arg(long = "auth-algorithm", env = "ESG_AUTH_ALGORITHMS", value_delimiter = ',')]
    pub auth_algorithms: Vec<String>,
    #[arg(long, env = "ESG_AUTH_CLOCK_SKEW_S")]
    pub auth_clock_skew_s: Option<f64>,
    /// Require a token for `/{version}/openapi.json` too.
    #[arg(long, env = "ESG_DOCS_REQUIRE_AUTH", num_args = 0..=1, default_missing_value = "true")]
    pub docs_require_auth: Option<bool>,
}

#[derive(Debug, Args)]
pub struct ServeApi {
    #[command(flatten)]
    pub broker: BrokerArgs,
    #[command(flatten)]
    pub auth: AuthArgs,
    #[arg(long, env = "ESG_BIND_ADDR")]
    pub bind_addr: Option<String>,
    #[arg(long, env = "ESG_BODY_LIMIT_BYTES")]
    pub body_limit_bytes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeWorker {
    #[command(flatten)]
    pub broker: BrokerArgs,
    /// Defaults to `<hostname>-<pid>`.
    #[arg(long, env = "ESG_WORKER_ID")]
    pub worker_id: Option<String>,
    #[arg(long, env = "ESG_WORKER_VISIBILITY_S")]
    pub worker_visibility_s: Option<f64>,
    #[arg(long, env = "ESG_WORKER_HEARTBEAT_S")]
    pub worker_heartbeat_s: Option<f64>,
    #[arg(long, env = "ESG_WORKER_GRACE_S")]
    pub worker_grace_s: Option<f64>,
    #[arg(long, env = "ESG_WORKER_MAX_RUNTIME_S")]
    pub worker_max_runtime_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeGc {
    #[command(flatten)]
    pub broker: BrokerArgs,
    #[arg(long, env = "ESG_GC_RETAIN_AFTER_FETCH_S")]
    pub gc_retain_after_fetch_s: Option<f64>,
    #[arg(long, env = "ESG_GC_ABSOLUTE_TTL_S")]
    pub gc_absolute_ttl_s: Option<f64>,
    #[arg(long, env = "ESG_GC_INTERVAL_S")]
    pub gc_interval_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeStore {
    #[arg(long, env = "ESG_BIND_ADDR")]
    pub bind_addr: Option<String>,
    #[arg(long, env = "ESG_STORE_PASSWORD")]
    pub store_password: Option<String>,
}

#[derive(Debug, Args)]
pub struct Openapi {
    #[arg(long = "version")]
    pub api_version: String,
    #[command(flatten)]
    pub auth: AuthArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Request,
    FitParameters,
}

impl From<KindArg> for EndpointKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Request => EndpointKind::Request,
            KindArg::FitParameters => EndpointKind::FitParameters,
        }
    }
}

#[derive(Debug, Args)]
pub struct Submit {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long = "version")]
    pub api_version: String,
    /// JSON input file, `-` for standard input.
    #[arg(long)]
    pub input: PathBuf,
    /// Wait for the result instead of printing the task id.
    #[arg(long)]
    pub wait: bool,
    #[arg(long, env = "ESG_BASE_URL")]
    pub base_url: Option<String>,
    #[arg(long, env = "ESG_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long, env = "ESG_MAX_WAIT_S")]
    pub max_wait_s: Option<f64>,
}

/// A failed command: message for standard error plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure { code: EXIT_TASK_FAILED, message: message.into() }
    }
}

/// The service this binary hosts.
pub fn service() -> ServiceSpec {
    esg_pv::pv_service()
}

/// Runs a parsed command. `stdout` receives documents and results.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<(), Failure> {
    let file = FileConfig::load(cli.config.as_deref()).map_err(Failure::usage)?;
    match cli.command {
        Command::ServeApi(args) => serve_api(args, &file),
        Command::ServeWorker(args) => serve_worker(args, &file),
        Command::ServeGc(args) => serve_gc(args, &file),
        Command::ServeStore(args) => serve_store(args, &file),
        Command::Openapi(args) => openapi(args, &file, stdout),
        Command::Submit(args) => submit(args, &file, stdout),
    }
}

fn connect_broker(args: BrokerArgs, file: &FileConfig) -> Result<Arc<dyn Broker>, Failure> {
    let url = pick(args.broker_url, file.broker_url.clone(), "redis://127.0.0.1:6379/0".into());
    let namespace = pick(args.namespace, file.namespace.clone(), "esg".into());
    let broker = Backoff::BROKER.retry(5, BrokerError::is_transient, || RespBroker::connect(&url, namespace.clone()));
    match broker {
        Ok(b) => Ok(Arc::new(b)),
        Err(e) => Err(Failure { code: EXIT_NO_VERDICT, message: format!("broker {url}: {e}") }),
    }
}

pub fn auth_policy(args: AuthArgs, file: &FileConfig) -> Result<AuthPolicy, Failure> {
    let enabled = pick(args.auth_enabled, file.auth_enabled, false);
    let docs_exempt = !pick(args.docs_require_auth, file.docs_require_auth, false);
    if !enabled {
        return Ok(AuthPolicy { docs_exempt, ..AuthPolicy::disabled() });
    }
    let algorithms = pick_list(args.auth_algorithms, file.auth_algorithms.clone());
    let accepted_algorithms = if algorithms.is_empty() {
        vec![Algorithm::RS256, Algorithm::ES256]
    } else {
        algorithms
            .iter()
            .map(|a| a.trim().parse::<Algorithm>().map_err(|_| Failure::usage(format!("unknown algorithm {a:?}"))))
            .collect::<Result<_, _>>()?
    };
    let jwks_url = args.auth_jwks_url.or(file.auth_jwks_url.clone());
    let key_files = pick_list(args.auth_public_keys, file.auth_public_keys.clone());
    let key_source = match (jwks_url, key_files.is_empty()) {
        (Some(url), true) => KeySource::Jwks {
            url,
            refresh_interval: seconds("auth_jwks_refresh_s", pick(args.auth_jwks_refresh_s, file.auth_jwks_refresh_s, 300.0))
                .map_err(Failure::usage)?,
        },
        (None, false) => KeySource::Static(key_files.iter().map(|p| load_key(p)).collect::<Result<_, _>>()?),
        (Some(_), false) => return Err(Failure::usage("configure either a JWKS URL or public key files, not both")),
        (None, true) => return Err(Failure::usage("auth enabled without a JWKS URL or public key files")),
    };
    let required_claim = match args.auth_required_claim.or(file.auth_required_claim.clone()) {
        Some(spec) => match spec.split_once('=') {
            Some((name, value)) if !name.is_empty() => Some((name.to_string(), value.to_string())),
            _ => return Err(Failure::usage(format!("required claim must be name=value, got {spec:?}"))),
        },
        None => None,
    };
    let policy = AuthPolicy {
        enabled,
        accepted_issuers: pick_list(args.auth_issuers, file.auth_issuers.clone()),
        required_audience: args.auth_audience.or(file.auth_audience.clone()),
        required_claim,
        key_source,
        accepted_algorithms,
        clock_skew_tolerance: seconds("auth_clock_skew_s", pick(args.auth_clock_skew_s, file.auth_clock_skew_s, 60.0))
            .map_err(Failure::usage)?,
        docs_exempt,
    };
    policy.check().map_err(Failure::usage)?;
    Ok(policy)
}

fn load_key(path: &Path) -> Result<VerificationKey, Failure> {
    let pem = std::fs::read(path).map_err(|e| Failure::usage(format!("cannot read key {}: {e}", path.display())))?;
    let kid = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    VerificationKey::from_pem(kid, &pem).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Triggers `shutdown` on SIGINT or SIGTERM.
fn on_signal(shutdown: Shutdown) {
    std::thread::spawn(move || {
        let Ok(runtime) = tokio::runtime::Builder::new_current_thread().enable_all().build() else { return };
        runtime.block_on(async {
            #[cfg(unix)]
            {
                use tokio::signal::unix::{signal, SignalKind};
                match signal(SignalKind::terminate()) {
                    Ok(mut term) => {
                        tokio::select! {
                            _ = tokio::signal::ctrl_c() => {}
                            _ = term.recv() => {}
                        }
                    }
                    Err(_) => {
                        let _ = tokio::signal::ctrl_c().await;
                    }
                }
            }
            #[cfg(not(unix))]
            let _ = tokio::signal::ctrl_c().await;
        });
        tracing::info!("shutdown requested");
        shutdown.trigger();
    });
}

fn serve_api(args: ServeApi, file: &FileConfig) -> Result<(), Failure> {
    let policy = auth_policy(args.auth, file)?;
    let bind = pick(args.bind_addr, file.bind_addr.clone(), "0.0.0.0:8000".into());
    let config = ApiConfig {
        body_limit: pick(args.body_limit_bytes, file.body_limit_bytes, ApiConfig::default().body_limit),
        ..ApiConfig::default()
    };
    let broker = connect_broker(args.broker, file)?;
    let auth = Arc::new(Authenticator::new(policy).map_err(Failure::usage)?);
    let state = ApiState::new(service(), broker, auth, config).map_err(|e| Failure::runtime(e.to_string()))?;
    let shutdown = Shutdown::new();
    on_signal(shutdown.clone());
    let server = ApiServer::start_with_shutdown(bind.as_str(), state, shutdown)
        .map_err(|e| Failure::runtime(format!("cannot serve on {bind}: {e}")))?;
    server.join().map_err(|e| Failure::runtime(e.to_string()))
}

fn serve_worker(args: ServeWorker, file: &FileConfig) -> Result<(), Failure> {
    let default_id = format!(
        "{}-{}",
        std::env::var("HOSTNAME").unwrap_or_else(|_| "worker".into()),
        std::process::id()
    );
    let mut cfg = WorkerConfig::new(pick(args.worker_id, file.worker_id.clone(), default_id));
    let secs = |name, cli: Option<f64>, file: Option<f64>, default: Duration| match cli.or(file) {
        Some(v) => seconds(name, v).map_err(Failure::usage),
        None => Ok(default),
    };
    cfg.visibility = secs("worker_visibility_s", args.worker_visibility_s, file.worker_visibility_s, cfg.visibility)?;
    cfg.heartbeat = secs("worker_heartbeat_s", args.worker_heartbeat_s, file.worker_heartbeat_s, cfg.heartbeat)?;
    cfg.grace = secs("worker_grace_s", args.worker_grace_s, file.worker_grace_s, cfg.grace)?;
    cfg.max_runtime = match args.worker_max_runtime_s.or(file.worker_max_runtime_s) {
        Some(v) => Some(seconds("worker_max_runtime_s", v).map_err(Failure::usage)?),
        None => None,
    };
    if cfg.heartbeat >= cfg.visibility {
        return Err(Failure::usage("worker heartbeat must be shorter than the visibility timeout"));
    }
    let broker = connect_broker(args.broker, file)?;
    let worker = Worker::new(Arc::new(service()), broker, cfg).map_err(|e| Failure::usage(e.to_string()))?;
    let shutdown = Shutdown::new();
    on_signal(shutdown.clone());
    worker.run(&shutdown);
    Ok(())
}

fn serve_gc(args: ServeGc, file: &FileConfig) -> Result<(), Failure> {
    let defaults = GcPolicy::default();
    let secs = |name, cli: Option<f64>, file: Option<f64>, default: Duration| match cli.or(file) {
        Some(v) => seconds(name, v).map_err(Failure::usage),
        None => Ok(default),
    };
    let policy = GcPolicy {
        retain_after_fetch: secs(
            "gc_retain_after_fetch_s",
            args.gc_retain_after_fetch_s,
            file.gc_retain_after_fetch_s,
            defaults.retain_after_fetch,
        )?,
        absolute_ttl: secs("gc_absolute_ttl_s", args.gc_absolute_ttl_s, file.gc_absolute_ttl_s, defaults.absolute_ttl)?,
    };
    policy.check().map_err(Failure::usage)?;
    let interval = secs("gc_interval_s", args.gc_interval_s, file.gc_interval_s, Duration::from_secs(60))?;
    if interval.is_zero() {
        return Err(Failure::usage("gc_interval_s must be positive"));
    }
    let broker = connect_broker(args.broker, file)?;
    let shutdown = Shutdown::new();
    on_signal(shutdown.clone());
    esg_server::run_gc(&*broker, &policy, interval, &shutdown);
    Ok(())
}

fn serve_store(args: ServeStore, file: &FileConfig) -> Result<(), Failure> {
    let bind = pick(args.bind_addr, file.bind_addr.clone(), "127.0.0.1:6379".into());
    let password = args.store_password.or(file.store_password.clone());
    let mut store = StoreServer::start(bind.as_str(), password)
        .map_err(|e| Failure::runtime(format!("cannot serve on {bind}: {e}")))?;
    tracing::info!(addr = %store.addr(), "store listening");
    let shutdown = Shutdown::new();
    on_signal(shutdown.clone());
    while !shutdown.wait_timeout(Duration::from_secs(3600)) {}
    store.stop();
    Ok(())
}

/// The document for `version`, as served at `/{version}/openapi.json`.
pub fn openapi_document(version: &str, options: &DocOptions) -> Result<Value, Failure> {
    let spec = service();
    let single = spec.only(version).ok_or_else(|| {
        let known: Vec<String> = spec.versions().map(|(t, _)| t.to_string()).collect();
        Failure::usage(format!("unknown version {version:?}; available: {}", known.join(", ")))
    })?;
    emit_openapi(&single, options).map_err(|e| Failure::runtime(e.to_string()))
}

fn openapi(args: Openapi, file: &FileConfig, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    let enabled = pick(args.auth.auth_enabled, file.auth_enabled, false);
    let docs_exempt = !pick(args.auth.docs_require_auth, file.docs_require_auth, false);
    let doc = openapi_document(&args.api_version, &DocOptions { auth_enabled: enabled, docs_exempt })?;
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::runtime(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| Failure::runtime(e.to_string()))
}

fn read_input(path: &Path) -> Result<Value, Failure> {
    let mut text = String::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut text).map_err(|e| Failure::usage(format!("cannot read input: {e}")))?;
    } else {
        text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read input {}: {e}", path.display())))?;
    }
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("input is not JSON: {e}")))
}

/// Exit code for a client error.
pub fn exit_code(error: &ClientError) -> i32 {
    match error.root() {
        ClientError::TaskFailed(_) => EXIT_TASK_FAILED,
        ClientError::ValidationRejected(_)
        | ClientError::AuthRejected { .. }
        | ClientError::NotFound(_)
        | ClientError::BadSlot(_) => EXIT_USAGE,
        ClientError::TimedOut { .. }
        | ClientError::Unreachable { .. }
        | ClientError::ServiceUnavailable(_)
        | ClientError::Unexpected { .. }
        | ClientError::Phase { .. } => EXIT_NO_VERDICT,
    }
}

fn client_failure(error: ClientError) -> Failure {
    let message = match &error {
        ClientError::ValidationRejected(issues) => {
            let detail = serde_json::json!({ "detail": issues });
            format!("input rejected (422):\n{}", serde_json::to_string_pretty(&detail).unwrap_or_default())
        }
        other => other.to_string(),
    };
    Failure { code: exit_code(&error), message }
}

fn submit(args: Submit, file: &FileConfig, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    let version: VersionTag = args.api_version.parse().map_err(|e| Failure::usage(format!("--version: {e}")))?;
    let input = read_input(&args.input)?;
    let base_url = pick(args.base_url, file.base_url.clone(), "http://127.0.0.1:8000".into());
    let mut client = Client::new(base_url).map_err(client_failure)?;
    if let Some(token) = args.token.or(file.token.clone()) {
        client = client.with_token(token);
    }
    let handle = client.submit(version.as_str(), args.kind.into(), &input).map_err(client_failure)?;
    let write = |out: &mut dyn std::io::Write, v: &Value| {
        writeln!(out, "{}", serde_json::to_string_pretty(v).unwrap_or_default()).map_err(|e| Failure::runtime(e.to_string()))
    };
    if !args.wait {
        return write(out, &serde_json::json!({ "task_ID": handle.task_id }));
    }
    let max_wait = seconds("max_wait_s", pick(args.max_wait_s, file.max_wait_s, 600.0)).map_err(Failure::usage)?;
    let policy = PollPolicy { max_wait: Some(max_wait), ..PollPolicy::default() };
    let result = client.wait(&handle, &policy).map_err(client_failure)?;
    write(out, &result)
}

/// Line-oriented JSON logs on standard output, filtered by `ESG_LOG`.
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("ESG_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().json().with_env_filter(filter).with_writer(std::io::stdout).try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("esg").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn auth_policy_from_flags_and_file() {
        let file: FileConfig = toml::from_str(
            "auth_enabled = true\nauth_jwks_url = \"http://idp/jwks\"\nauth_issuers = [\"a\", \"b\"]\nauth_audience = \"file-aud\"\n",
        )
        .unwrap();
        let Command::ServeApi(args) =
            parse(&["serve-api", "--auth-audience", "flag-aud", "--auth-required-claim", "roles=forecast"]).command
        else {
            unreachable!()
        };
        let policy = auth_policy(args.auth, &file).unwrap();
        assert!(policy.enabled);
        assert_eq!(policy.accepted_issuers, vec!["a", "b"]);
        assert_eq!(policy.required_audience.as_deref(), Some("flag-aud"));
        assert_eq!(policy.required_claim, Some(("roles".into(), "forecast".into())));
        assert!(matches!(policy.key_source, KeySource::Jwks { refresh_interval, .. } if refresh_interval == Duration::from_secs(300)));
        assert!(policy.docs_exempt);
    }

    #[test]
    fn auth_misconfiguration_is_a_usage_error() {
        let Command::ServeApi(args) = parse(&["serve-api", "--auth-enabled"]).command else { unreachable!() };
        assert_eq!(auth_policy(args.auth, &FileConfig::default()).unwrap_err().code, EXIT_USAGE);
        let Command::ServeApi(args) =
            parse(&["serve-api", "--auth-enabled", "--auth-jwks-url", "http://x", "--auth-algorithm", "XX1"]).command
        else {
            unreachable!()
        };
        assert_eq!(auth_policy(args.auth, &FileConfig::default()).unwrap_err().code, EXIT_USAGE);
    }

    #[test]
    fn openapi_is_byte_stable() {
        let render = || {
            let mut out = Vec::new();
            run(parse(&["openapi", "--version", "v1"]), &mut out).unwrap();
            out
        };
        let first = render();
        assert_eq!(first, render());
        let doc: Value = serde_json::from_slice(&first).unwrap();
        assert_eq!(doc["info"]["version"], "v1");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&ClientError::TaskFailed("x".into())), EXIT_TASK_FAILED);
        assert_eq!(exit_code(&ClientError::ValidationRejected(vec![])), EXIT_USAGE);
        assert_eq!(exit_code(&ClientError::TimedOut { waited: Duration::ZERO }), EXIT_NO_VERDICT);
        assert_eq!(exit_code(&ClientError::Unreachable { url: "u".into(), reason: "r".into() }), EXIT_NO_VERDICT);
    }
}
