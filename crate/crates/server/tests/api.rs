use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use futures::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use phonconv::config::FeatureConfig;
use phonconv::session::{verify_replay, SessionArchive};
use phonconv_server::app::router;
use phonconv_server::hub::Hub;

const DOMAIN: &str = r#"<domain id="shop" initial="greet">
  <state id="greet">
    <prompt>Guten Tag!</prompt>
    <trigger pattern="*" target="ask"/>
  </state>
  <phase id="baseline">
    <state id="ask">
      <prompt>War das <w feature="ae">Gerät</w> sehr teuer?</prompt>
      <trigger pattern="tschüss" target="end"/>
      <trigger pattern="*" target="ask"/>
    </state>
  </phase>
  <state id="end" terminal="true"><prompt>Auf Wiedersehen.</prompt></state>
</domain>"#;

fn hub() -> Arc<Hub> {
    Arc::new(Hub::new(vec![FeatureConfig::builtin()], vec![DOMAIN.to_string()]).unwrap())
}

fn record(f1: f64, f2: f64) -> Value {
    json!({
        "speaker": "user",
        "transcript": "Gerät",
        "segments": [
            {"phone": "e:", "start_ms": 30, "end_ms": 150, "features": {"ae": [f1, f2]}}
        ]
    })
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn new_session(app: &axum::Router) -> String {
    let (status, body) = call(
        app,
        "POST",
        "/api/sessions",
        Some(json!({"domain_id": "shop", "feature_config_id": "shadowing-de"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn create_sessions() {
    let app = router(hub());
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    assert_ne!(a, b);
    let (status, body) = call(&app, "GET", &format!("/api/sessions/{a}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["turn_count"], 0);
    assert_eq!(body["event_count"], 0);
    assert_eq!(body["state_id"], "greet");

    let (status, body) = call(
        &app,
        "POST",
        "/api/sessions",
        Some(json!({"domain_id": "nope", "feature_config_id": "shadowing-de"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_domain");
    let (status, body) = call(
        &app,
        "POST",
        "/api/sessions",
        Some(json!({"domain_id": "shop", "feature_config_id": "nope"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_config");
    // the only loaded resources are the defaults
    let (status, _) = call(&app, "POST", "/api/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::CREATED);
}

#[tokio::test]
async fn text_and_spoken_turns() {
    let app = router(hub());
    let id = new_session(&app).await;
    let (status, body) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/turns"),
        Some(json!({"text": "hallo"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["user"]["index"], 0);
    assert_eq!(body["system"]["index"], 1);
    assert_eq!(body["system"]["transcript"], "War das Gerät sehr teuer?");

    let (status, body) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/turns"),
        Some(json!({"record": record(420.0, 2250.0)})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let first = body["first_seq"].as_u64().unwrap() as usize;

    let (_, archive) = call(&app, "GET", &format!("/api/sessions/{id}/archive"), None).await;
    let kinds: Vec<&str> = archive["events"].as_array().unwrap()[first..]
        .iter()
        .map(|e| e["kind"].as_str().unwrap())
        .collect();
    assert_eq!(
        kinds,
        [
            "turn_added",
            "exemplar_accepted",
            "state_updated",
            "prediction_made",
            "prediction_made",
            "turn_added",
            "prediction_made"
        ]
    );
    let (_, summary) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(summary["turn_count"], 4);
    assert_eq!(summary["features"][0]["feature_id"], "ae");
    assert_eq!(summary["features"][0]["update_count"], 1);
}

#[tokio::test]
async fn turn_errors() {
    let app = router(hub());
    let (status, body) = call(&app, "POST", "/api/sessions/missing/turns", Some(json!({"text": "x"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_session");

    let id = new_session(&app).await;
    let uri = format!("/api/sessions/{id}/turns");
    let mut bad = record(420.0, 2250.0);
    bad["segments"][0]["features"]["ae"] = json!([420.0]);
    let (status, body) = call(&app, "POST", &uri, Some(json!({"record": bad}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "validation_error");
    let (status, _) = call(&app, "POST", &uri, Some(json!({"speech": "x"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, summary) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(summary["event_count"], 0);

    call(&app, "POST", &uri, Some(json!({"text": "hallo"}))).await;
    call(&app, "POST", &uri, Some(json!({"text": "tschüss"}))).await;
    let (status, body) = call(&app, "POST", &uri, Some(json!({"text": "noch da?"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "terminal_session");
}

#[tokio::test]
async fn features_endpoint() {
    let app = router(hub());
    let (status, body) = call(&app, "GET", "/api/features", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["ae", "ig", "en"]);
    assert_eq!(body[0]["dimensions"][0]["name"], "F1");
    let (status, _) = call(&app, "GET", "/api/features?config=nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn archive_endpoint_replays() {
    let app = router(hub());
    let id = new_session(&app).await;
    let uri = format!("/api/sessions/{id}/turns");
    call(&app, "POST", &uri, Some(json!({"text": "hallo"}))).await;
    for f1 in [420.0, 430.0, 1500.0] {
        call(&app, "POST", &uri, Some(json!({"record": record(f1, 2250.0)}))).await;
    }
    let (_, archive) = call(&app, "GET", &format!("/api/sessions/{id}/archive"), None).await;
    let archive = SessionArchive::from_json(&archive.to_string()).unwrap();
    assert_eq!(archive.session_id, id);
    let replayed = verify_replay(&archive).unwrap();
    assert_eq!(replayed.turns().len(), 8);
}

// --- live server -----------------------------------------------------------

async fn spawn() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(hub())).await.unwrap() });
    format!("http://{addr}")
}

/// Reads `n` server-sent events from an open response.
async fn read_events(resp: reqwest::Response, n: usize) -> Vec<Value> {
    let mut stream = resp.bytes_stream();
    let mut buf = String::new();
    let mut out = Vec::new();
    let deadline = tokio::time::sleep(Duration::from_secs(10));
    tokio::pin!(deadline);
    while out.len() < n {
        tokio::select! {
            chunk = stream.next() => {
                let chunk = chunk.expect("stream ended early").unwrap();
                buf.push_str(std::str::from_utf8(&chunk).unwrap());
                while let Some(end) = buf.find("\n\n") {
                    let message: String = buf.drain(..end + 2).collect();
                    let data: String = message
                        .lines()
                        .filter_map(|l| l.strip_prefix("data:"))
                        .map(str::trim_start)
                        .collect();
                    if !data.is_empty() {
                        out.push(serde_json::from_str(&data).unwrap());
                    }
                }
            }
            _ = &mut deadline => panic!("timed out after {} of {n} events", out.len()),
        }
    }
    out
}

async fn post(client: &reqwest::Client, base: &str, path: &str, body: Value) -> Value {
    client
        .post(format!("{base}{path}"))
        .json(&body)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap()
}

fn seqs(events: &[Value]) -> Vec<u64> {
    events.iter().map(|e| e["seq"].as_u64().unwrap()).collect()
}

#[tokio::test]
async fn event_stream_backlog_then_live() {
    let base = spawn().await;
    let client = reqwest::Client::new();
    let id = post(&client, &base, "/api/sessions", json!({})).await["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let turns = format!("/api/sessions/{id}/turns");
    // text turn with a phase change: 4 events, then a spoken turn: 7 more;
    // later turns stay in the phase
    post(&client, &base, &turns, json!({"text": "hallo"})).await;
    post(&client, &base, &turns, json!({"record": record(420.0, 2250.0)})).await;

    let resp = client
        .get(format!("{base}/api/sessions/{id}/events?from=0"))
        .send()
        .await
        .unwrap();
    assert_eq!(
        resp.headers()["content-type"].to_str().unwrap(),
        "text/event-stream"
    );
    let live_turn = {
        let client = client.clone();
        let base = base.clone();
        let turns = turns.clone();
        tokio::spawn(async move {
            tokio::time::sleep(Duration::from_millis(100)).await;
            post(&client, &base, &turns, json!({"text": "weiter"})).await
        })
    };
    let events = read_events(resp, 14).await;
    live_turn.await.unwrap();
    assert_eq!(seqs(&events), (0..14).collect::<Vec<_>>());
    assert_eq!(events[11]["kind"], "turn_added");
    assert_eq!(events[11]["turn"]["transcript"], "weiter");

    // reconnect after the last seen event
    let resp = client
        .get(format!("{base}/api/sessions/{id}/events?from=14"))
        .send()
        .await
        .unwrap();
    post(&client, &base, &turns, json!({"text": "noch einmal"})).await;
    let events = read_events(resp, 3).await;
    assert_eq!(seqs(&events), vec![14, 15, 16]);

    // Last-Event-ID works the same way
    let resp = client
        .get(format!("{base}/api/sessions/{id}/events"))
        .header("last-event-id", "14")
        .send()
        .await
        .unwrap();
    let events = read_events(resp, 2).await;
    assert_eq!(seqs(&events), vec![15, 16]);

    let resp = client
        .get(format!("{base}/api/sessions/nope/events"))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);
}

#[tokio::test]
async fn concurrent_subscribers_see_identical_sequences() {
    let base = spawn().await;
    let client = reqwest::Client::new();
    let id = post(&client, &base, "/api/sessions", json!({})).await["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let turns = format!("/api/sessions/{id}/turns");
    post(&client, &base, &turns, json!({"text": "hallo"})).await;

    let url = format!("{base}/api/sessions/{id}/events?from=0");
    let a = client.get(&url).send().await.unwrap();
    let b = client.get(&url).send().await.unwrap();
    // 4 + 10 spoken turns of 7 events each
    let total = 4 + 10 * 7;
    let reader_a = tokio::spawn(read_events(a, total));
    let reader_b = tokio::spawn(read_events(b, total));
    for i in 0..10 {
        post(&client, &base, &turns, json!({"record": record(400.0 + i as f64, 2250.0)})).await;
    }
    let (ea, eb) = (reader_a.await.unwrap(), reader_b.await.unwrap());
    assert_eq!(seqs(&ea), (0..total as u64).collect::<Vec<_>>());
    assert_eq!(ea, eb);
}

#[tokio::test]
async fn replay_source_upload() {
    let base = spawn().await;
    let client = reqwest::Client::new();
    let id = post(&client, &base, "/api/sessions", json!({})).await["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let stream: String = [420.0, 430.0, 440.0]
        .iter()
        .map(|f1| record(*f1, 2250.0).to_string() + "\n")
        .collect();
    let form = reqwest::multipart::Form::new().part(
        "file",
        reqwest::multipart::Part::text(stream).file_name("p01.jsonl"),
    );
    let resp = client
        .post(format!("{base}/api/sessions/{id}/replay-source"))
        .multipart(form)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["turns"].as_array().unwrap().len(), 3);
    assert_eq!(body["skipped"], 0);

    let form = reqwest::multipart::Form::new().part(
        "file",
        reqwest::multipart::Part::text(format!("{}\nnot json\n", record(420.0, 2250.0))),
    );
    let resp = client
        .post(format!("{base}/api/sessions/{id}/replay-source"))
        .multipart(form)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 422);
    let body: Value = resp.json().await.unwrap();
    assert!(body["message"].as_str().unwrap().starts_with("line 2"));
    let summary: Value = client
        .get(format!("{base}/api/sessions/{id}"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    // the malformed upload posted nothing
    assert_eq!(summary["turn_count"], 6);
}
