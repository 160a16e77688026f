use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use meed::corpus::build_vocab;
use meed::emotion::EmotionLexicon;
use meed::inference::DecodeConfig;
use meed::models::{Model, ModelConfig, ModelKind};
use meed::synthetic::toy_dialogs;
use meed_service::server::{ChatResponse, Health, PublicConfig};
use meed_service::{router, App, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn toy_app(kind: ModelKind, tweak: impl FnOnce(&mut ServiceConfig)) -> Arc<App> {
    let vocab = build_vocab(&toy_dialogs(20, 4, 3), 60).unwrap();
    let model = Model::<f32>::new(ModelConfig::uniform(kind, vocab.len(), 8), 11).unwrap();
    let mut cfg = ServiceConfig {
        decode: DecodeConfig {
            beam_width: 3,
            max_len: 8,
            length_normalize: false,
        },
        ..ServiceConfig::default()
    };
    tweak(&mut cfg);
    Arc::new(App::new(model, vocab, EmotionLexicon::bundled(), cfg).unwrap())
}

async fn send(app: &Arc<App>, req: Request<Body>) -> (StatusCode, Value) {
    let res = router(app.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn chat_req(body: Value) -> Request<Body> {
    Request::post("/v1/chat")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn chat(app: &Arc<App>, session: Option<&str>, utterance: &str) -> ChatResponse {
    let (status, v) = send(app, chat_req(json!({"session_id": session, "utterance": utterance}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn health(app: &Arc<App>) -> Health {
    let (status, v) = send(app, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn first_message_creates_a_session_and_reports_indicators() {
    let app = toy_app(ModelKind::Meed, |_| {});
    let r = chat(&app, None, "he is worried about me").await;
    assert_eq!(r.session_id.len(), 32);
    assert!(r.session_id.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(r.emotions.last(), Some(&[0, 1, 1, 0, 0, 0]));
    let beta = r.attention.expect("hierarchical model reports attention");
    assert_eq!(beta.len(), r.emotions.len());
    assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(r.turn_count == 1 || r.turn_count == 2);
}

#[tokio::test]
async fn follow_up_turns_grow_the_context() {
    let app = toy_app(ModelKind::Meed, |_| {});
    let a = chat(&app, None, "hello there").await;
    let b = chat(&app, Some(&a.session_id), "how are you").await;
    assert_eq!(b.session_id, a.session_id);
    assert!(b.turn_count > a.turn_count);
    assert!(b.emotions.len() > a.emotions.len());
    assert_eq!(b.emotions[0], [0, 0, 0, 0, 0, 1]);
}

#[tokio::test]
async fn unknown_session_id_gets_a_fresh_session() {
    let app = toy_app(ModelKind::Meed, |_| {});
    let r = chat(&app, Some("not-a-session"), "hello").await;
    assert_ne!(r.session_id, "not-a-session");
    assert!(r.turn_count <= 2);
}

#[tokio::test]
async fn s2s_reports_no_attention_and_no_indicators() {
    let app = toy_app(ModelKind::S2S, |_| {});
    let r = chat(&app, None, "he is worried about me").await;
    assert!(r.attention.is_none());
    assert!(r.emotions.is_empty());
}

#[tokio::test]
async fn empty_and_malformed_requests_are_rejected() {
    let app = toy_app(ModelKind::Meed, |_| {});
    for u in ["", "   \t "] {
        let (status, v) = send(&app, chat_req(json!({ "utterance": u }))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(v["error"]["code"], "empty_utterance");
    }
    let (status, v) = send(&app, Request::post("/v1/chat").body(Body::from("{not json")).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "bad_request");
    assert_eq!(health(&app).await.sessions_active, 0);
}

#[tokio::test]
async fn health_counts_sessions_and_eviction() {
    let app = toy_app(ModelKind::Hran, |c| c.idle_timeout_secs = 60);
    let h = health(&app).await;
    assert_eq!((h.status.as_str(), h.model_kind.as_str(), h.sessions_active), ("ok", "hran", 0));
    assert_eq!(h.vocab_size, app.vocab.len());
    chat(&app, None, "hi").await;
    assert_eq!(health(&app).await.sessions_active, 1);
    chat(&app, None, "hi again").await;
    assert_eq!(health(&app).await.sessions_active, 2);
    let evicted = app.sessions.evict_idle(Instant::now() + Duration::from_secs(61));
    assert_eq!(evicted, 2);
    assert_eq!(health(&app).await.sessions_active, 0);
}

#[tokio::test]
async fn config_endpoint_reports_decode_defaults() {
    let app = toy_app(ModelKind::Meed, |_| {});
    let (status, v) = send(&app, Request::get("/v1/config").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let c: PublicConfig = serde_json::from_value(v).unwrap();
    assert_eq!(c.model_kind, "meed");
    assert_eq!(c.decode.beam_width, 3);
    assert_eq!(c.decode.max_len, 8);
    assert_eq!(c.max_context_turns, 5);
}

#[tokio::test]
async fn interleaved_sessions_match_serial_execution() {
    let script_a = ["i am so happy today", "the weather is nice", "let us go out", "what do you think"];
    let script_b = ["he is worried about me", "i feel sad", "why is that", "tell me more"];

    let serial = toy_app(ModelKind::Meed, |_| {});
    let mut expect_a = Vec::new();
    let mut id = None;
    for u in script_a {
        let r = chat(&serial, id.as_deref(), u).await;
        id = Some(r.session_id.clone());
        expect_a.push((r.response, r.emotions, r.attention, r.turn_count));
    }
    let mut expect_b = Vec::new();
    let mut id = None;
    for u in script_b {
        let r = chat(&serial, id.as_deref(), u).await;
        id = Some(r.session_id.clone());
        expect_b.push((r.response, r.emotions, r.attention, r.turn_count));
    }

    let app = toy_app(ModelKind::Meed, |_| {});
    let (mut a_id, mut b_id): (Option<String>, Option<String>) = (None, None);
    let (mut got_a, mut got_b) = (Vec::new(), Vec::new());
    for (ua, ub) in script_a.iter().zip(script_b) {
        let (ra, rb) = tokio::join!(chat(&app, a_id.as_deref(), ua), chat(&app, b_id.as_deref(), ub));
        a_id = Some(ra.session_id.clone());
        b_id = Some(rb.session_id.clone());
        got_a.push((ra.response, ra.emotions, ra.attention, ra.turn_count));
        got_b.push((rb.response, rb.emotions, rb.attention, rb.turn_count));
    }
    assert_eq!(got_a, expect_a);
    assert_eq!(got_b, expect_b);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_turns_on_one_session_are_serialized() {
    let app = toy_app(ModelKind::Meed, |_| {});
    let first = chat(&app, None, "hello").await;
    let id = first.session_id.clone();
    let tasks: Vec<_> = (0..6)
        .map(|i| {
            let app = app.clone();
            let id = id.clone();
            tokio::spawn(async move { chat(&app, Some(&id), &format!("message number {i}")).await })
        })
        .collect();
    let mut counts = Vec::new();
    for t in tasks {
        counts.push(t.await.unwrap().turn_count);
    }
    counts.sort_unstable();
    counts.dedup();
    assert_eq!(counts.len(), 6, "every turn saw a distinct history length");
}

#[tokio::test]
async fn request_waiting_past_the_deadline_is_busy_while_health_answers() {
    let app = toy_app(ModelKind::Meed, |c| c.request_timeout_ms = 50);
    let first = chat(&app, None, "hello").await;
    let (_, session) = app.sessions.checkout(Some(&first.session_id)).unwrap();
    let held = session.lock().await;
    let (status, v) = send(
        &app,
        chat_req(json!({"session_id": first.session_id, "utterance": "are you there"})),
    )
    .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"]["code"], "busy");
    assert_eq!(health(&app).await.sessions_active, 1);
    drop(held);
    chat(&app, Some(&first.session_id), "are you there").await;
}

#[tokio::test]
async fn session_limit_is_enforced() {
    let app = toy_app(ModelKind::Meed, |c| c.max_sessions = 1);
    let a = chat(&app, None, "hello").await;
    let (status, v) = send(&app, chat_req(json!({ "utterance": "another" }))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"]["code"], "session_limit");
    chat(&app, Some(&a.session_id), "still works").await;
    assert_eq!(health(&app).await.sessions_active, 1);
}

#[tokio::test]
async fn cors_allows_only_configured_origins() {
    let app = toy_app(ModelKind::Meed, |c| c.cors_origins = vec!["http://ui.example".into()]);
    let preflight = |origin: &str| {
        Request::builder()
            .method("OPTIONS")
            .uri("/v1/chat")
            .header(header::ORIGIN, origin)
            .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
            .body(Body::empty())
            .unwrap()
    };
    let ok = router(app.clone()).oneshot(preflight("http://ui.example")).await.unwrap();
    assert_eq!(ok.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(), "http://ui.example");
    let other = router(app.clone()).oneshot(preflight("http://evil.example")).await.unwrap();
    assert!(other.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

#[tokio::test]
async fn serving_never_changes_the_parameters() {
    let app = toy_app(ModelKind::Meed, |_| {});
    let before = app.checksum.clone();
    let r = chat(&app, None, "he is worried about me").await;
    chat(&app, Some(&r.session_id), "and so am i").await;
    assert!(app.checksum_matches());
    assert_eq!(app.checksum, before);
}

#[tokio::test]
async fn serve_loop_answers_over_tcp_and_shuts_down() {
    let app = toy_app(ModelKind::Meed, |_| {});
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(meed_service::server::serve(app.clone(), listener, async {
        let _ = rx.await;
    }));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /v1/health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut buf = String::new();
    stream.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    assert!(buf.contains("\"status\":\"ok\""));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
