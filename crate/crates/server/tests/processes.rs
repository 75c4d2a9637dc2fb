//! API, worker and collector instances cooperating through a shared broker,
//! as separate processes would.

use std::sync::Arc;
use std::time::{Duration, Instant};

use esg_broker::resp::StoreServer;
use esg_broker::{Broker, MemoryBroker, RespBroker};
use esg_core::EndpointKind;
use esg_server::{ApiConfig, ApiServer, ApiState, AuthPolicy, Authenticator, GcPolicy, Shutdown, Worker, WorkerConfig};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

fn api(broker: Arc<dyn Broker>) -> ApiServer {
    let auth = Arc::new(Authenticator::new(AuthPolicy::disabled()).unwrap());
    let state = ApiState::new(esg_pv::pv_service(), broker, auth, ApiConfig::default()).unwrap();
    ApiServer::start("127.0.0.1:0", state).unwrap()
}

fn spawn_worker(broker: Arc<dyn Broker>, id: &str, stop: &Shutdown) -> std::thread::JoinHandle<()> {
    let mut cfg = WorkerConfig::new(id);
    cfg.poll_wait = Duration::from_millis(100);
    let worker = Worker::new(Arc::new(esg_pv::pv_service()), broker, cfg).unwrap();
    let stop = stop.clone();
    std::thread::spawn(move || worker.run(&stop))
}

fn request(hour: u32) -> Value {
    json!({
        "position": {"latitude": 49.0, "longitude": 8.4},
        "sunrise": "2024-06-01T06:00:00Z",
        "sunset": "2024-06-01T18:00:00Z",
        "parameters": {"peak_power_kw": 3.0},
        "times": [format!("2024-06-01T{hour:02}:00:00Z")]
    })
}

fn wait_ready(client: &Client, base: &str, id: &str) {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let status: Value = client.get(format!("{base}/v1/request/{id}/status/")).send().unwrap().json().unwrap();
        if status["status"] == "ready" {
            return;
        }
        assert!(Instant::now() < deadline, "task {id} still {status}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// Submits through `a`, polls and fetches through `b`.
fn interchangeable(a_broker: Arc<dyn Broker>, b_broker: Arc<dyn Broker>, worker_broker: Arc<dyn Broker>) {
    let (a, b) = (api(a_broker), api(b_broker));
    let stop = Shutdown::new();
    let worker = spawn_worker(worker_broker, "w", &stop);
    let client = Client::new();
    let mut ids = vec![];
    for hour in 6..=18 {
        let response = client.post(format!("{}/v1/request/", a.base_url())).json(&request(hour)).send().unwrap();
        assert_eq!(response.status(), StatusCode::CREATED);
        ids.push((hour, response.json::<Value>().unwrap()["task_ID"].as_str().unwrap().to_string()));
    }
    for (hour, id) in ids {
        wait_ready(&client, &b.base_url(), &id);
        let result: Value =
            client.get(format!("{}/v1/request/{id}/result/", b.base_url())).send().unwrap().json().unwrap();
        let expected = 3.0 * (std::f64::consts::PI * f64::from(hour - 6) / 12.0).sin();
        let got = result["forecast"][0]["value"].as_f64().unwrap();
        assert!((got - expected).abs() < 1e-9, "hour {hour}: {got} vs {expected}");
    }
    stop.trigger();
    worker.join().unwrap();
}

#[test]
fn api_instances_share_an_in_memory_broker() {
    let broker = MemoryBroker::new();
    interchangeable(Arc::new(broker.clone()), Arc::new(broker.clone()), Arc::new(broker));
}

#[test]
fn api_instances_share_a_resp_store() {
    let store = StoreServer::start("127.0.0.1:0", Some("secret".into())).unwrap();
    let connect = || -> Arc<dyn Broker> { Arc::new(RespBroker::connect(&store.url(2), "esg").unwrap()) };
    interchangeable(connect(), connect(), connect());
}

#[test]
fn crashed_worker_task_is_recovered_by_collector_reaping() {
    let store = StoreServer::start("127.0.0.1:0", None).unwrap();
    let broker: Arc<dyn Broker> = Arc::new(RespBroker::connect(&store.url(0), "esg").unwrap());
    let server = api(broker.clone());
    let client = Client::new();
    let id = client
        .post(format!("{}/v1/request/", server.base_url()))
        .json(&request(12))
        .send()
        .unwrap()
        .json::<Value>()
        .unwrap()["task_ID"]
        .as_str()
        .unwrap()
        .to_string();
    // A worker claims the task and dies before storing an outcome.
    let v1 = esg_core::VersionTag::new("v1").unwrap();
    let lost = broker.claim(&v1, EndpointKind::Request, "crashed", Duration::from_millis(200), Duration::ZERO);
    assert!(lost.unwrap().is_some());

    let stop = Shutdown::new();
    let gc = {
        let (broker, stop) = (broker.clone(), stop.clone());
        std::thread::spawn(move || esg_server::run_gc(&*broker, &GcPolicy::default(), Duration::from_millis(100), &stop))
    };
    // The surviving worker only reaps rarely; recovery comes from the collector.
    let mut cfg = WorkerConfig::new("survivor");
    cfg.reap_interval = Duration::from_secs(3600);
    cfg.poll_wait = Duration::from_millis(100);
    let worker = Worker::new(Arc::new(esg_pv::pv_service()), broker.clone(), cfg).unwrap();
    let handle = {
        let stop = stop.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(50));
            worker.run(&stop)
        })
    };
    wait_ready(&client, &server.base_url(), &id);
    let result = client.get(format!("{}/v1/request/{id}/result/", server.base_url())).send().unwrap();
    assert_eq!(result.status(), StatusCode::OK);
    stop.trigger();
    handle.join().unwrap();
    gc.join().unwrap();
}

#[test]
fn results_disappear_after_retention() {
    let broker = MemoryBroker::new();
    let server = api(Arc::new(broker.clone()));
    let stop = Shutdown::new();
    let worker = spawn_worker(Arc::new(broker.clone()), "w", &stop);
    let policy = GcPolicy { retain_after_fetch: Duration::from_millis(300), absolute_ttl: Duration::from_secs(3600) };
    let gc = {
        let (broker, stop) = (broker.clone(), stop.clone());
        std::thread::spawn(move || esg_server::run_gc(&broker, &policy, Duration::from_millis(50), &stop))
    };
    let client = Client::new();
    let base = server.base_url();
    let id = client.post(format!("{base}/v1/request/")).json(&request(9)).send().unwrap().json::<Value>().unwrap()
        ["task_ID"]
        .as_str()
        .unwrap()
        .to_string();
    wait_ready(&client, &base, &id);
    // Unfetched results are kept.
    std::thread::sleep(Duration::from_millis(500));
    let url = format!("{base}/v1/request/{id}/result/");
    assert_eq!(client.get(&url).send().unwrap().status(), StatusCode::OK);
    std::thread::sleep(Duration::from_millis(800));
    assert_eq!(client.get(&url).send().unwrap().status(), StatusCode::NOT_FOUND);
    assert_eq!(
        client.get(format!("{base}/v1/request/{id}/status/")).send().unwrap().status(),
        StatusCode::NOT_FOUND
    );
    stop.trigger();
    worker.join().unwrap();
    gc.join().unwrap();
}
