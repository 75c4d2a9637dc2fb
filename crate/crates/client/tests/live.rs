//! The client against an in-process API, worker and broker.

use std::sync::Arc;
use std::time::{Duration, Instant};

use esg_broker::MemoryBroker;
use esg_client::{Client, ClientError, Phase, PollPolicy};
use esg_core::schema::SchemaNode;
use esg_core::{Backoff, Endpoint, EndpointKind, HandlerError, Progress, ServiceSpec, VersionSpec};
use esg_server::{ApiConfig, ApiServer, ApiState, AuthPolicy, Authenticator, Shutdown, Worker, WorkerConfig};
use serde_json::{json, Value};

struct Stack {
    api: ApiServer,
    stop: Shutdown,
    workers: Vec<std::thread::JoinHandle<()>>,
}

impl Stack {
    fn start(spec: ServiceSpec, workers: usize) -> Stack {
        let broker = MemoryBroker::new();
        let auth = Arc::new(Authenticator::new(AuthPolicy::disabled()).unwrap());
        let state = ApiState::new(spec.clone(), Arc::new(broker.clone()), auth, ApiConfig::default()).unwrap();
        let api = ApiServer::start("127.0.0.1:0", state).unwrap();
        let stop = Shutdown::new();
        let spec = Arc::new(spec);
        let workers = (0..workers)
            .map(|i| {
                let mut cfg = WorkerConfig::new(format!("w{i}"));
                cfg.poll_wait = Duration::from_millis(50);
                let worker = Worker::new(spec.clone(), Arc::new(broker.clone()), cfg).unwrap();
                let stop = stop.clone();
                std::thread::spawn(move || worker.run(&stop))
            })
            .collect();
        Stack { api, stop, workers }
    }

    fn client(&self) -> Client {
        Client::new(self.api.base_url()).unwrap()
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        self.stop.trigger();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn sleepy_service() -> ServiceSpec {
    let io = SchemaNode::object().field("sleep_ms", SchemaNode::integer().minimum(0.0));
    let handler = |input: &Value, _: &Progress| -> Result<Value, HandlerError> {
        let ms = input["sleep_ms"].as_u64().unwrap_or(0);
        if ms == 13 {
            return Err(HandlerError::new("unlucky input"));
        }
        std::thread::sleep(Duration::from_millis(ms));
        Ok(input.clone())
    };
    ServiceSpec::new("sleepy").version("v1", VersionSpec::new(Endpoint::new(io.clone(), io, handler)))
}

fn policy(initial_ms: u64, max_wait: Duration) -> PollPolicy {
    PollPolicy { backoff: Backoff { initial: Duration::from_millis(initial_ms), ..Backoff::POLL }, max_wait: Some(max_wait) }
}

#[test]
fn instant_task_returns_within_first_backoff() {
    let stack = Stack::start(sleepy_service(), 1);
    let client = stack.client();
    let started = Instant::now();
    let result = client.call("v1", EndpointKind::Request, &json!({"sleep_ms": 0}), &PollPolicy::default()).unwrap();
    assert_eq!(result, json!({"sleep_ms": 0}));
    // Initial delay 1 s with +20% jitter, plus slack.
    assert!(started.elapsed() < Duration::from_millis(1500), "{:?}", started.elapsed());
}

#[test]
fn failing_task_surfaces_detail() {
    let stack = Stack::start(sleepy_service(), 1);
    let err = stack
        .client()
        .call("v1", EndpointKind::Request, &json!({"sleep_ms": 13}), &policy(20, Duration::from_secs(10)))
        .unwrap_err();
    assert!(matches!(&err, ClientError::TaskFailed(d) if d == "unlucky input"), "{err}");
}

#[test]
fn timed_out_wait_can_be_resumed() {
    let stack = Stack::start(sleepy_service(), 1);
    let client = stack.client();
    let handle = client.submit("v1", EndpointKind::Request, &json!({"sleep_ms": 10_000})).unwrap();
    let started = Instant::now();
    let err = client.wait(&handle, &policy(200, Duration::from_secs(2))).unwrap_err();
    assert!(matches!(err, ClientError::TimedOut { .. }), "{err}");
    assert!(started.elapsed() < Duration::from_secs(3));
    let result = client.wait(&handle, &policy(200, Duration::from_secs(30))).unwrap();
    assert_eq!(result, json!({"sleep_ms": 10_000}));
}

#[test]
fn validation_rejection_carries_issues() {
    let stack = Stack::start(sleepy_service(), 0);
    let err = stack.client().submit("v1", EndpointKind::Request, &json!({"sleep_ms": -1})).unwrap_err();
    let ClientError::ValidationRejected(issues) = err else { panic!("{err}") };
    assert_eq!(issues[0].loc, "/sleep_ms");
}

#[test]
fn unknown_endpoint_is_not_found() {
    let stack = Stack::start(sleepy_service(), 0);
    let err = stack.client().submit("v1", EndpointKind::FitParameters, &json!({})).unwrap_err();
    assert!(matches!(err, ClientError::NotFound(_)), "{err}");
}

fn pv_fit_input() -> Value {
    json!({
        "position": {"latitude": 49.0, "longitude": 8.4},
        "sunrise": "2024-06-01T06:00:00Z",
        "sunset": "2024-06-01T18:00:00Z",
        "measurements": [
            {"time": "2024-06-01T06:00:00Z", "value": 0.0},
            {"time": "2024-06-01T08:00:00Z", "value": 1.0},
            {"time": "2024-06-01T12:00:00Z", "value": 2.0},
            {"time": "2024-06-01T16:00:00Z", "value": 1.0}
        ]
    })
}

fn pv_request_template() -> Value {
    json!({
        "position": {"latitude": 49.0, "longitude": 8.4},
        "sunrise": "2024-06-01T06:00:00Z",
        "sunset": "2024-06-01T18:00:00Z",
        "times": ["2024-06-01T09:00:00Z", "2024-06-01T12:00:00Z"]
    })
}

#[test]
fn fit_then_request_with_pv_service() {
    let stack = Stack::start(esg_pv::pv_service(), 2);
    let out = stack
        .client()
        .fit_then_request("v1", &pv_fit_input(), &pv_request_template(), "/parameters", &policy(20, Duration::from_secs(10)))
        .unwrap();
    assert_eq!(out.parameters, json!({"peak_power_kw": 2.0}));
    let values: Vec<f64> = out.result["forecast"].as_array().unwrap().iter().map(|p| p["value"].as_f64().unwrap()).collect();
    assert!((values[0] - 2.0 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12, "{values:?}");
    assert!((values[1] - 2.0).abs() < 1e-12, "{values:?}");
}

#[test]
fn fit_then_request_labels_the_failing_phase() {
    let stack = Stack::start(esg_pv::pv_service(), 1);
    let client = stack.client();
    let mut night = pv_fit_input();
    night["measurements"] = json!([{"time": "2024-06-01T23:00:00Z", "value": 1.0}]);
    let err = client
        .fit_then_request("v1", &night, &pv_request_template(), "/parameters", &policy(20, Duration::from_secs(10)))
        .unwrap_err();
    assert!(matches!(err, ClientError::Phase { phase: Phase::Fit, .. }), "{err}");
    assert!(matches!(err.root(), ClientError::TaskFailed(_)));

    let mut bad_template = pv_request_template();
    bad_template["times"] = json!(["2024-06-01T12:00:00Z", "2024-06-01T09:00:00Z"]);
    let err = client
        .fit_then_request("v1", &pv_fit_input(), &bad_template, "/parameters", &policy(20, Duration::from_secs(10)))
        .unwrap_err();
    assert!(matches!(err, ClientError::Phase { phase: Phase::Request, .. }), "{err}");
    assert!(matches!(err.root(), ClientError::ValidationRejected(_)));
}
