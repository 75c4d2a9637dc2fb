use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use esg_broker::MemoryBroker;
use esg_server::{ApiConfig, ApiServer, ApiState, AuthPolicy, Authenticator, Shutdown, Worker, WorkerConfig};
use serde_json::{json, Value};

const ESG: &str = env!("CARGO_BIN_EXE_esg");

fn esg(args: &[&str]) -> Command {
    let mut cmd = Command::new(ESG);
    cmd.args(args);
    for (key, _) in std::env::vars() {
        if key.starts_with("ESG_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

fn output(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (status.code().unwrap_or(-1), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

/// An API and one worker in this process, sharing an in-memory broker.
struct Stack {
    api: ApiServer,
    stop: Shutdown,
    worker: Option<std::thread::JoinHandle<()>>,
}

impl Stack {
    fn start(with_worker: bool) -> Stack {
        let broker = MemoryBroker::new();
        let auth = Arc::new(Authenticator::new(AuthPolicy::disabled()).unwrap());
        let state = ApiState::new(esg_pv::pv_service(), Arc::new(broker.clone()), auth, ApiConfig::default()).unwrap();
        let api = ApiServer::start("127.0.0.1:0", state).unwrap();
        let stop = Shutdown::new();
        let worker = with_worker.then(|| {
            let worker = Worker::new(Arc::new(esg_pv::pv_service()), Arc::new(broker), WorkerConfig::new("w")).unwrap();
            let stop = stop.clone();
            std::thread::spawn(move || worker.run(&stop))
        });
        Stack { api, stop, worker }
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        self.stop.trigger();
        if let Some(w) = self.worker.take() {
            w.join().unwrap();
        }
    }
}

fn fit_input() -> Value {
    json!({
        "position": {"latitude": 49.0, "longitude": 8.4},
        "sunrise": "2024-06-01T06:00:00Z",
        "sunset": "2024-06-01T18:00:00Z",
        "measurements": [
            {"time": "2024-06-01T09:00:00Z", "value": std::f64::consts::FRAC_1_SQRT_2},
            {"time": "2024-06-01T12:00:00Z", "value": 1.0}
        ]
    })
}

fn write_json(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, value.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn dead_url() -> String {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    format!("http://127.0.0.1:{port}")
}

#[test]
fn openapi_prints_a_stable_document() {
    let (code, first, _) = output(&mut esg(&["openapi", "--version", "v1"]));
    assert_eq!(code, 0);
    let (_, second, _) = output(&mut esg(&["openapi", "--version", "v1"]));
    assert_eq!(first, second);
    let doc: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(doc["openapi"], "3.1.0");

    let (code, _, err) = output(&mut esg(&["openapi", "--version", "v7"]));
    assert_eq!(code, 2);
    assert!(err.contains("unknown version"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(output(&mut esg(&["submit", "--kind", "nonsense", "--version", "v1", "--input", "x"])).0, 2);
    assert_eq!(output(&mut esg(&["frobnicate"])).0, 2);
    let (code, _, err) = output(&mut esg(&["submit", "--kind", "request", "--version", "v1", "--input", "/no/such/file"]));
    assert_eq!(code, 2, "{err}");
}

#[test]
fn submit_and_wait_prints_the_result() {
    let stack = Stack::start(true);
    let dir = tempfile::tempdir().unwrap();
    let input = write_json(dir.path(), "fit.json", &fit_input());
    let base = stack.api.base_url();
    let (code, out, err) = output(&mut esg(&[
        "submit", "--kind", "fit-parameters", "--version", "v1", "--input", &input, "--wait", "--base-url", &base,
    ]));
    assert_eq!(code, 0, "{err}");
    let result: Value = serde_json::from_str(&out).unwrap();
    let p = result["parameters"]["peak_power_kw"].as_f64().unwrap();
    assert!((p - 1.0).abs() < 1e-12, "{result}");

    // Without --wait only the task id is printed.
    let (code, out, _) = output(&mut esg(&["submit", "--kind", "fit-parameters", "--version", "v1", "--input", &input, "--base-url", &base]));
    assert_eq!(code, 0);
    assert!(serde_json::from_str::<Value>(&out).unwrap()["task_ID"].is_string());
}

#[test]
fn invalid_input_prints_detail_and_exits_2() {
    let stack = Stack::start(false);
    let dir = tempfile::tempdir().unwrap();
    let mut bad = fit_input();
    bad["position"]["latitude"] = json!(95);
    let input = write_json(dir.path(), "bad.json", &bad);
    let (code, _, err) = output(&mut esg(&[
        "submit", "--kind", "fit-parameters", "--version", "v1", "--input", &input, "--base-url", &stack.api.base_url(),
    ]));
    assert_eq!(code, 2);
    assert!(err.contains("/position/latitude") && err.contains("\"detail\""), "{err}");
}

#[test]
fn failed_task_exits_1() {
    let stack = Stack::start(true);
    let dir = tempfile::tempdir().unwrap();
    let mut night = fit_input();
    night["measurements"] = json!([{"time": "2024-06-01T23:00:00Z", "value": 1.0}]);
    let input = write_json(dir.path(), "night.json", &night);
    let (code, _, err) = output(&mut esg(&[
        "submit", "--kind", "fit-parameters", "--version", "v1", "--input", &input, "--wait", "--base-url", &stack.api.base_url(),
    ]));
    assert_eq!(code, 1);
    assert!(err.contains("all measurements outside daylight window"), "{err}");
}

#[test]
fn timeout_and_unreachable_exit_3() {
    let stack = Stack::start(false);
    let dir = tempfile::tempdir().unwrap();
    let input = write_json(dir.path(), "fit.json", &fit_input());
    let args = ["submit", "--kind", "fit-parameters", "--version", "v1", "--input", &input, "--wait"];
    let mut cmd = esg(&args);
    cmd.args(["--base-url", &stack.api.base_url(), "--max-wait-s", "0.5"]);
    let (code, _, err) = output(&mut cmd);
    assert_eq!(code, 3, "{err}");

    let mut cmd = esg(&args);
    cmd.args(["--base-url", &dead_url()]);
    let (code, _, err) = output(&mut cmd);
    assert_eq!(code, 3);
    assert!(err.contains("cannot reach"), "{err}");
}

#[test]
fn flags_beat_environment_beat_file() {
    let stack = Stack::start(true);
    let live = stack.api.base_url();
    let dir = tempfile::tempdir().unwrap();
    let input = write_json(dir.path(), "fit.json", &fit_input());
    let config = dir.path().join("esg.toml");
    let args = ["submit", "--kind", "fit-parameters", "--version", "v1", "--input", &input];

    std::fs::write(&config, format!("base_url = \"{live}\"\n")).unwrap();
    let mut cmd = esg(&args);
    cmd.arg("--config").arg(&config);
    assert_eq!(output(&mut cmd).0, 0, "file alone");

    cmd.env("ESG_BASE_URL", dead_url());
    assert_eq!(output(&mut cmd).0, 3, "environment overrides file");

    cmd.args(["--base-url", &live]);
    assert_eq!(output(&mut cmd).0, 0, "flag overrides environment");
}

fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

/// Kills the process if the test fails before terminating it.
struct Proc(Option<Child>);

impl Drop for Proc {
    fn drop(&mut self) {
        if let Some(mut c) = self.0.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn spawn(args: &[&str]) -> Proc {
    Proc(Some(esg(args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap()))
}

fn terminate(mut proc: Proc) -> (i32, Vec<Value>) {
    let mut child = proc.0.take().unwrap();
    Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let status = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "process ignored SIGTERM");
        std::thread::sleep(Duration::from_millis(20));
    };
    let logs = BufReader::new(child.stdout.take().unwrap())
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).expect("log lines are JSON"))
        .collect();
    (status.code().unwrap_or(-1), logs)
}

#[test]
fn separate_processes_form_a_deployment() {
    let store_addr = free_addr();
    let api_addr = free_addr();
    let store = spawn(&["serve-store", "--bind-addr", &store_addr, "--store-password", "pw"]);
    let broker_url = format!("redis://:pw@{store_addr}/0");
    let broker = ["--broker-url", broker_url.as_str(), "--namespace", "cli-test"];

    let mut api_args = vec!["serve-api", "--bind-addr", api_addr.as_str()];
    api_args.extend(broker);
    let api = spawn(&api_args);
    let mut worker_args = vec!["serve-worker", "--worker-id", "cli-worker", "--worker-grace-s", "5"];
    worker_args.extend(broker);
    let worker = spawn(&worker_args);
    let mut gc_args = vec!["serve-gc", "--gc-interval-s", "0.2"];
    gc_args.extend(broker);
    let gc = spawn(&gc_args);

    let client = esg_client::Client::new(format!("http://{api_addr}")).unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let handle = loop {
        match client.submit("v1", esg_core::EndpointKind::FitParameters, &fit_input()) {
            Ok(h) => break h,
            Err(e) => {
                assert!(Instant::now() < deadline, "API never came up: {e}");
                std::thread::sleep(Duration::from_millis(100));
            }
        }
    };
    let policy = esg_client::PollPolicy {
        backoff: esg_core::Backoff { initial: Duration::from_millis(50), ..esg_core::Backoff::POLL },
        max_wait: Some(Duration::from_secs(30)),
    };
    let result = client.wait(&handle, &policy).unwrap();
    assert!((result["parameters"]["peak_power_kw"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    for child in [api, worker, gc] {
        let (code, logs) = terminate(child);
        assert_eq!(code, 0);
        assert!(!logs.is_empty());
        assert!(logs.iter().all(|l| l["level"].is_string() && l["timestamp"].is_string()));
    }
    let (code, _) = terminate(store);
    assert_eq!(code, 0);
}
