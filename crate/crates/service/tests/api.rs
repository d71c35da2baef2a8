use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use bricks_core::sessions::{EventKind, SessionEvent, SessionState, Snapshot};
use bricks_service::{Server, ServiceConfig};
use futures_util::StreamExt;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

struct Running {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
    http: Client,
}

impl Running {
    async fn start(data: &Path, tick_hz: f64) -> Self {
        let config = ServiceConfig {
            listen: "127.0.0.1:0".parse().unwrap(),
            data_dir: data.to_owned(),
            tick_hz,
            seed: 7,
            ..ServiceConfig::default()
        };
        let server = Server::bind(config).await.unwrap();
        let addr = server.local_addr();
        let (stop, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            server
                .run(async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
        });
        Self {
            addr,
            stop: Some(stop),
            task: Some(task),
            http: Client::new(),
        }
    }

    async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.task.take().unwrap().await.unwrap();
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    fn ws_url(&self, path: &str) -> String {
        format!("ws://{}{}", self.addr, path)
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(self.url(path)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self
            .http
            .post(self.url(path))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn create(&self, experiment: &str) -> String {
        let (status, body) = self
            .post("/sessions", json!({ "experiment": experiment }))
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["id"].as_str().unwrap().to_owned()
    }

    async fn command(&self, id: &str, cmd: Value) -> (StatusCode, Value) {
        self.post(&format!("/sessions/{id}/commands"), cmd).await
    }

    async fn ok(&self, id: &str, cmd: Value) -> Value {
        let (status, body) = self.command(id, cmd).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body
    }

    async fn snapshot(&self, id: &str) -> Snapshot {
        let (status, body) = self.get(&format!("/sessions/{id}/snapshot")).await;
        assert_eq!(status, StatusCode::OK);
        serde_json::from_value(body).unwrap()
    }
}

fn record(label: &str) -> Value {
    json!({ "command": "fruit_record", "label": label })
}

fn mode(m: &str) -> Value {
    json!({ "command": "set_mode", "mode": m })
}

type Ws =
    tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn next_event(ws: &mut Ws) -> Option<SessionEvent> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .ok()??
            .ok()?;
        match msg {
            Message::Text(t) => return Some(serde_json::from_str(&t).unwrap()),
            Message::Close(_) => return None,
            _ => continue,
        }
    }
}

async fn quiet(ws: &mut Ws) -> bool {
    tokio::time::timeout(Duration::from_millis(300), ws.next())
        .await
        .is_err()
}

#[tokio::test]
async fn create_fruit_session_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let (status, health) = srv.get("/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");

    let (status, d) = srv
        .post("/sessions", json!({ "experiment": "fruit" }))
        .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(d["experiment"], "fruit");
    assert_eq!(d["backend"], "sim");
    assert_eq!(d["seed"], 7);
    let id = d["id"].as_str().unwrap();

    let (_, raw) = srv.get(&format!("/sessions/{id}/snapshot")).await;
    assert_eq!(raw["version"], 1);
    assert_eq!(raw["seq"], 0);
    assert_eq!(raw["state"]["experiment"], "fruit");
    assert_eq!(raw["state"]["mode"], "Training");
    assert_eq!(raw["state"]["k"], 3);
    assert_eq!(raw["state"]["samples"], json!([]));

    let (_, list) = srv.get("/sessions").await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    let (status, info) = srv.get(&format!("/sessions/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(info["device"]["status"], "Connected");
    assert_eq!(info["seq"], 0);

    let (_, crawler) = srv
        .post("/sessions", json!({ "experiment": "crawler" }))
        .await;
    let snap = srv.snapshot(crawler["id"].as_str().unwrap()).await;
    let SessionState::Crawler(c) = snap.state else {
        panic!()
    };
    assert_eq!((c.params.epsilon, c.params.gamma), (0.5, 0.0));
    srv.stop().await;
}

#[tokio::test]
async fn error_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let id = srv.create("fruit").await;

    srv.ok(&id, mode("Inference")).await;
    let (status, body) = srv.command(&id, record("Apple")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "wrong_mode");

    let (status, body) = srv.command("nope", record("Apple")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "session_not_found");
    assert_eq!(
        srv.get("/sessions/nope/snapshot").await.0,
        StatusCode::NOT_FOUND
    );

    for bad in [
        json!({ "command": "fly" }),
        json!({ "command": "fruit_record", "label": "Orange" }),
        json!({ "label": "Apple" }),
        json!({ "command": "pitcher_autofit" }),
    ] {
        let (status, body) = srv.command(&id, bad.clone()).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad} -> {body}");
    }
    let r = srv
        .http
        .post(srv.url(&format!("/sessions/{id}/commands")))
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let (status, body) = srv
        .command(&id, json!({ "command": "fruit_classify" }))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "no_training_data");

    let (status, _) = srv
        .post("/sessions", json!({ "experiment": "juggler" }))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = srv
        .post(
            "/sessions",
            json!({ "experiment": "pitcher", "sim": { "pitcher_noise_sigma": -1.0 } }),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let c = srv.create("crawler").await;
    let (status, body) = srv.command(&c, json!({ "command": "crawler_step" })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "wrong_run_state");

    assert_eq!(srv.snapshot(&id).await.seq, 1);
    srv.stop().await;
}

#[tokio::test]
async fn device_outage_is_503_and_recoverable() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let id = srv.create("fruit").await;
    srv.ok(&id, record("Apple")).await;

    srv.post(&format!("/sessions/{id}/sim/link"), json!({ "down": true }))
        .await;
    let (status, body) = srv.command(&id, record("Apple")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"]["code"], "device_unavailable");
    let (_, dev) = srv.get(&format!("/sessions/{id}/device")).await;
    assert_eq!(dev["status"], "Reconnecting");
    assert_eq!(srv.snapshot(&id).await.seq, 1);
    let (status, _) = srv
        .post(&format!("/sessions/{id}/device/reconnect"), json!({}))
        .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    srv.post(
        &format!("/sessions/{id}/sim/link"),
        json!({ "down": false }),
    )
    .await;
    let (status, dev) = srv
        .post(&format!("/sessions/{id}/device/reconnect"), json!({}))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dev["status"], "Connected");
    srv.ok(&id, record("Banana")).await;
    assert_eq!(srv.snapshot(&id).await.seq, 2);
    srv.stop().await;
}

#[tokio::test]
async fn command_reply_carries_outcome_events_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let id = srv.create("pitcher").await;
    let reply = srv
        .ok(&id, json!({ "command": "pitcher_set_speed", "speed": 65 }))
        .await;
    assert_eq!(reply["outcome"]["outcome"], "done");
    assert_eq!(
        reply["events"],
        json!([{ "seq": 1, "kind": "ParamsChanged" }])
    );
    assert_eq!(reply["snapshot"]["seq"], 1);
    let reply = srv
        .ok(&id, json!({ "command": "pitcher_launch_and_measure" }))
        .await;
    assert_eq!(reply["outcome"]["outcome"], "measured");
    assert_eq!(reply["outcome"]["point"]["speed"], 65.0);

    // The event is on disk by the time the reply arrives.
    let log = std::fs::read_to_string(dir.path().join("sessions").join(&id).join("events.jsonl"))
        .unwrap();
    assert_eq!(log.lines().count(), 2);
    let (_, events) = srv.get(&format!("/sessions/{id}/events?after=1")).await;
    assert_eq!(events.as_array().unwrap().len(), 1);
    assert_eq!(events[0]["seq"], 2);
    assert_eq!(events[0]["kind"], "SampleAdded");
    let (status, _) = srv.get(&format!("/sessions/{id}/events?after=x")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    srv.stop().await;
}

#[tokio::test]
async fn restart_restores_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let fruit = srv.create("fruit").await;
    let pitcher = srv.create("pitcher").await;
    let crawler = srv.create("crawler").await;
    for label in ["Apple", "Banana", "Apple"] {
        srv.ok(&fruit, record(label)).await;
    }
    srv.ok(&fruit, json!({ "command": "fruit_set_k", "k": 1 }))
        .await;
    srv.ok(&pitcher, json!({ "command": "pitcher_launch_and_measure" }))
        .await;
    srv.ok(
        &crawler,
        json!({ "command": "crawler_control", "action": "start" }),
    )
    .await;
    for _ in 0..25 {
        srv.ok(&crawler, json!({ "command": "crawler_step" })).await;
    }
    let before = [
        srv.snapshot(&fruit).await,
        srv.snapshot(&pitcher).await,
        srv.snapshot(&crawler).await,
    ];
    srv.stop().await;

    let srv = Running::start(dir.path(), 0.0).await;
    let after = [
        srv.snapshot(&fruit).await,
        srv.snapshot(&pitcher).await,
        srv.snapshot(&crawler).await,
    ];
    assert_eq!(before, after);
    let (_, list) = srv.get("/sessions").await;
    assert_eq!(list.as_array().unwrap().len(), 3);

    // The restored crawler keeps stepping from where its arm was.
    let reply = srv.ok(&crawler, json!({ "command": "crawler_step" })).await;
    assert_eq!(reply["snapshot"]["seq"], after[2].seq + 2);
    srv.stop().await;
}

#[tokio::test]
async fn delete_removes_session() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let id = srv.create("fruit").await;
    let (mut ws, _) =
        tokio_tungstenite::connect_async(srv.ws_url(&format!("/sessions/{id}/stream")))
            .await
            .unwrap();
    let r = srv
        .http
        .delete(srv.url(&format!("/sessions/{id}")))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
    assert!(next_event(&mut ws).await.is_none());
    assert_eq!(
        srv.get(&format!("/sessions/{id}")).await.0,
        StatusCode::NOT_FOUND
    );
    assert!(!dir.path().join("sessions").join(&id).exists());
    srv.stop().await;
}

#[tokio::test]
async fn stream_delivers_and_resumes_without_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let id = srv.create("fruit").await;
    let path = format!("/sessions/{id}/stream");

    let (mut a, _) = tokio_tungstenite::connect_async(srv.ws_url(&path))
        .await
        .unwrap();
    let (mut b, _) = tokio_tungstenite::connect_async(srv.ws_url(&path))
        .await
        .unwrap();
    let reply = srv.ok(&id, record("Apple")).await;
    let ea = next_event(&mut a).await.unwrap();
    let eb = next_event(&mut b).await.unwrap();
    assert_eq!(ea.kind, EventKind::SampleAdded);
    assert_eq!(ea.seq, 1);
    assert_eq!(
        serde_json::to_value(&ea.change).unwrap()["sample"],
        reply["outcome"]["sample"]
    );
    assert_eq!(ea, eb);

    // a disconnects, three more samples are recorded, then a resumes.
    a.close(None).await.unwrap();
    drop(a);
    for _ in 0..3 {
        srv.ok(&id, record("Banana")).await;
    }
    let n = ea.seq;
    let (mut a, _) = tokio_tungstenite::connect_async(srv.ws_url(&format!("{path}?after={n}")))
        .await
        .unwrap();
    let mut resumed = Vec::new();
    for _ in 0..3 {
        resumed.push(next_event(&mut a).await.unwrap());
    }
    assert_eq!(
        resumed.iter().map(|e| e.seq).collect::<Vec<_>>(),
        vec![n + 1, n + 2, n + 3]
    );
    assert!(quiet(&mut a).await);

    // b saw everything live, in the same order.
    let mut live = Vec::new();
    for _ in 0..3 {
        live.push(next_event(&mut b).await.unwrap());
    }
    assert_eq!(live, resumed);

    srv.ok(&id, record("Apple")).await;
    assert_eq!(next_event(&mut a).await.unwrap().seq, 5);
    assert_eq!(next_event(&mut b).await.unwrap().seq, 5);

    let unknown = tokio_tungstenite::connect_async(srv.ws_url("/sessions/nope/stream")).await;
    match unknown {
        Err(tokio_tungstenite::tungstenite::Error::Http(r)) => {
            assert_eq!(r.status().as_u16(), 404)
        }
        other => panic!("expected a refused upgrade, got {other:?}"),
    }
    srv.stop().await;
}

#[tokio::test]
async fn concurrent_commands_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let id = srv.create("fruit").await;
    let (mut ws, _) =
        tokio_tungstenite::connect_async(srv.ws_url(&format!("/sessions/{id}/stream")))
            .await
            .unwrap();
    let url = srv.url(&format!("/sessions/{id}/commands"));
    let tasks: Vec<_> = (0..20)
        .map(|_| {
            let http = srv.http.clone();
            let url = url.clone();
            tokio::spawn(async move {
                http.post(url)
                    .json(&record("Apple"))
                    .send()
                    .await
                    .unwrap()
                    .json::<Value>()
                    .await
                    .unwrap()
            })
        })
        .collect();
    let mut ids = Vec::new();
    for t in tasks {
        ids.push(
            t.await.unwrap()["outcome"]["sample"]["id"]
                .as_u64()
                .unwrap(),
        );
    }
    ids.sort();
    assert_eq!(ids, (0..20).collect::<Vec<_>>());
    for seq in 1..=20 {
        assert_eq!(next_event(&mut ws).await.unwrap().seq, seq);
    }
    srv.stop().await;
}

#[tokio::test]
async fn boundary_and_sim_fruit() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let id = srv.create("fruit").await;
    assert_eq!(
        srv.get(&format!("/sessions/{id}/boundary")).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    srv.ok(&id, record("Apple")).await;
    let (status, _) = srv
        .post(
            &format!("/sessions/{id}/sim/fruit"),
            json!({ "kind": "Banana" }),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    let b = srv.ok(&id, record("Banana")).await;
    assert!(b["outcome"]["sample"]["point"]["length"].as_f64().unwrap() > 120.0);

    let (status, grid) = srv
        .get(&format!("/sessions/{id}/boundary?resolution=20"))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(grid["resolution"], 20);
    let labels = grid["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 20);
    let flat: Vec<&str> = labels
        .iter()
        .flat_map(|row| row.as_array().unwrap().iter().map(|v| v.as_str().unwrap()))
        .collect();
    assert!(flat.contains(&"Apple") && flat.contains(&"Banana"));
    assert_eq!(
        srv.get(&format!("/sessions/{id}/boundary?resolution=1"))
            .await
            .0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let p = srv.create("pitcher").await;
    assert_eq!(
        srv.get(&format!("/sessions/{p}/boundary")).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    srv.stop().await;
}

#[tokio::test]
async fn crawler_ticks_while_running() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 50.0).await;
    let id = srv.create("crawler").await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    assert_eq!(srv.snapshot(&id).await.seq, 0);
    srv.ok(
        &id,
        json!({ "command": "crawler_control", "action": "start" }),
    )
    .await;
    tokio::time::sleep(Duration::from_millis(500)).await;
    srv.ok(
        &id,
        json!({ "command": "crawler_control", "action": "pause" }),
    )
    .await;
    let paused = srv.snapshot(&id).await;
    let SessionState::Crawler(c) = &paused.state else {
        panic!()
    };
    assert!(c.step_count >= 3, "only {} steps", c.step_count);
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert_eq!(srv.snapshot(&id).await, paused);
    srv.stop().await;
}

#[tokio::test]
async fn cors_allows_browser_origin() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(dir.path(), 0.0).await;
    let r = srv
        .http
        .get(srv.url("/health"))
        .header("Origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(
        r.headers()
            .get("access-control-allow-origin")
            .map(|v| v.to_str().unwrap()),
        Some("*")
    );
    srv.stop().await;
}
