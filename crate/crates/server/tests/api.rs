use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use esg_broker::{Broker, MemoryBroker};
use esg_core::schema::SchemaNode;
use esg_core::{Endpoint, HandlerError, Progress, ServiceSpec, VersionSpec};
use esg_server::api::router;
use esg_server::{ApiConfig, ApiState, AuthPolicy, Authenticator, Shutdown, Worker, WorkerConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fit_payload() -> Value {
    json!({
        "position": {"latitude": 49.0, "longitude": 8.4},
        "sunrise": "2024-06-01T06:00:00Z",
        "sunset": "2024-06-01T18:00:00Z",
        "measurements": [
            {"time": "2024-06-01T09:00:00Z", "value": std::f64::consts::SQRT_2},
            {"time": "2024-06-01T12:00:00Z", "value": 2.0}
        ]
    })
}

struct Fixture {
    app: Router,
    broker: MemoryBroker,
    spec: Arc<ServiceSpec>,
}

impl Fixture {
    fn new(spec: ServiceSpec) -> Self {
        let broker = MemoryBroker::new();
        let auth = Arc::new(Authenticator::new(AuthPolicy::disabled()).unwrap());
        let config = ApiConfig { broker_retries: 1, ..ApiConfig::default() };
        let spec = Arc::new(spec);
        let state = ApiState::new((*spec).clone(), Arc::new(broker.clone()), auth, config).unwrap();
        Fixture { app: router(state), broker, spec }
    }

    fn pv() -> Self {
        Self::new(esg_pv::pv_service())
    }

    async fn call(&self, method: Method, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, axum::http::HeaderMap, Value) {
        let mut request = Request::builder().method(method).uri(uri);
        if body.is_some() {
            request = request.header(header::CONTENT_TYPE, "application/json");
        }
        let request = request.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
        let response = self.app.clone().oneshot(request).await.unwrap();
        let (parts, body) = response.into_parts();
        let bytes = to_bytes(body, usize::MAX).await.unwrap();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).expect("JSON body") };
        (parts.status, parts.headers, value)
    }

    async fn post(&self, uri: &str, payload: &Value) -> (StatusCode, Value) {
        let (s, _, v) = self.call(Method::POST, uri, Some(payload.to_string().into_bytes())).await;
        (s, v)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        let (s, _, v) = self.call(Method::GET, uri, None).await;
        (s, v)
    }

    fn work_one(&self) {
        let worker = Worker::new(self.spec.clone(), Arc::new(self.broker.clone()), WorkerConfig::new("t")).unwrap();
        worker.poll_once(&Shutdown::new()).unwrap().expect("a queued task");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn fit_round_trip() {
    let f = Fixture::pv();
    let (status, body) = f.post("/v1/fit-parameters/", &fit_payload()).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = body["task_ID"].as_str().unwrap().to_string();
    assert_eq!(body.as_object().unwrap().len(), 1);
    uuid_like(&id);

    let base = format!("/v1/fit-parameters/{id}");
    assert_eq!(f.get(&format!("{base}/status/")).await, (StatusCode::OK, json!({"status": "queued"})));
    assert_eq!(f.get(&format!("{base}/result/")).await, (StatusCode::CONFLICT, json!({"detail": "result not ready"})));

    tokio::task::block_in_place(|| f.work_one());
    assert_eq!(f.get(&format!("{base}/status/")).await, (StatusCode::OK, json!({"status": "ready"})));
    let (status, result) = f.get(&format!("{base}/result/")).await;
    assert_eq!(status, StatusCode::OK);
    let peak = result["parameters"]["peak_power_kw"].as_f64().unwrap();
    assert!((peak - 2.0).abs() < 1e-9, "{result}");
    // Fetching again returns the same result until garbage collected.
    assert_eq!(f.get(&format!("{base}/result/")).await, (StatusCode::OK, result));
}

fn uuid_like(id: &str) {
    assert_eq!(id.len(), 36, "{id}");
    assert_eq!(id.matches('-').count(), 4, "{id}");
}

#[tokio::test(flavor = "multi_thread")]
async fn failed_task_reports_500_with_detail() {
    let f = Fixture::pv();
    let mut payload = fit_payload();
    payload["measurements"] = json!([{"time": "2024-06-01T22:00:00Z", "value": 1.0}]);
    let (_, body) = f.post("/v1/fit-parameters/", &payload).await;
    tokio::task::block_in_place(|| f.work_one());
    let id = body["task_ID"].as_str().unwrap();
    let (status, body) = f.get(&format!("/v1/fit-parameters/{id}/result/")).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(body, json!({"detail": "all measurements outside daylight window"}));
}

#[tokio::test]
async fn validation_errors_are_422_with_locations() {
    let f = Fixture::pv();
    let mut payload = fit_payload();
    payload["position"]["latitude"] = json!(123.0);
    payload["sunrise"] = json!("yesterday");
    let (status, body) = f.post("/v1/fit-parameters/", &payload).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let locs: Vec<&str> = body["detail"].as_array().unwrap().iter().map(|i| i["loc"].as_str().unwrap()).collect();
    assert!(locs.contains(&"/position/latitude"), "{body}");
    assert!(locs.contains(&"/sunrise"), "{body}");
    assert!(body["detail"].as_array().unwrap().iter().all(|i| i["msg"].is_string()));

    let (status, _, body) = f.call(Method::POST, "/v1/request/", Some(b"{not json".to_vec())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["detail"][0]["msg"].as_str().unwrap().starts_with("invalid JSON"));
    assert_eq!(f.broker.key_count().unwrap(), 0, "rejected submissions must not be enqueued");
}

#[tokio::test]
async fn unknown_routes_are_404() {
    let f = Fixture::pv();
    let id = esg_core::TaskId::new();
    for uri in [
        format!("/v1/request/{id}/status/"),
        format!("/v1/request/{id}/result/"),
        "/v1/request/not-a-uuid/status/".to_string(),
        "/v9/openapi.json".to_string(),
        "/nothing/here/at/all/".to_string(),
    ] {
        let (status, body) = f.get(&uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert!(body["detail"].is_string(), "{uri}");
    }
    for uri in ["/v2/request/", "/v1/forecast/"] {
        assert_eq!(f.post(uri, &json!({})).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn slash_less_paths_redirect_permanently() {
    let f = Fixture::pv();
    let (status, headers, body) = f.call(Method::POST, "/v1/request", Some(b"{}".to_vec())).await;
    assert_eq!(status, StatusCode::PERMANENT_REDIRECT);
    assert_eq!(headers[header::LOCATION], "/v1/request/");
    assert!(body["detail"].is_string());
    let id = esg_core::TaskId::new();
    let (status, headers, _) = f.call(Method::GET, &format!("/v1/request/{id}/status"), None).await;
    assert_eq!(status, StatusCode::PERMANENT_REDIRECT);
    assert_eq!(headers[header::LOCATION], format!("/v1/request/{id}/status/").as_str());
}

#[tokio::test]
async fn oversized_bodies_are_413() {
    let f = Fixture::pv();
    let big = format!("{{\"pad\": \"{}\"}}", "x".repeat(10 * 1024 * 1024 + 1));
    let (status, _, body) = f.call(Method::POST, "/v1/request/", Some(big.into_bytes())).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(body["detail"].is_string());
}

#[tokio::test]
async fn wrong_method_is_405_json() {
    let f = Fixture::pv();
    let (status, _, body) = f.call(Method::GET, "/v1/request/", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert!(body["detail"].is_string());
}

#[tokio::test]
async fn openapi_document_is_served() {
    let f = Fixture::pv();
    let (status, doc) = f.get("/v1/openapi.json").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(doc["openapi"], "3.1.0");
    let paths = doc["paths"].as_object().unwrap();
    assert!(paths.contains_key("/v1/fit-parameters/"), "{:?}", paths.keys());
    assert!(paths.contains_key("/v1/request/{task_ID}/result/"), "{:?}", paths.keys());
}

#[tokio::test(flavor = "multi_thread")]
async fn broker_outage_is_503() {
    let f = Fixture::pv();
    f.broker.set_available(false);
    let (status, body) = f.post("/v1/fit-parameters/", &fit_payload()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["detail"].is_string());
    f.broker.set_available(true);
    assert_eq!(f.post("/v1/fit-parameters/", &fit_payload()).await.0, StatusCode::CREATED);
}

#[tokio::test(flavor = "multi_thread")]
async fn submission_does_not_wait_for_computation() {
    let io = SchemaNode::object().field("x", SchemaNode::number());
    let slow = |v: &Value, _: &Progress| -> Result<Value, HandlerError> {
        std::thread::sleep(Duration::from_secs(10));
        Ok(v.clone())
    };
    let f = Fixture::new(ServiceSpec::new("slow").version("v1", VersionSpec::new(Endpoint::new(io.clone(), io, slow))));
    let started = Instant::now();
    let (status, _) = f.post("/v1/request/", &json!({"x": 1})).await;
    assert_eq!(status, StatusCode::CREATED);
    assert!(started.elapsed() < Duration::from_secs(1));
}
