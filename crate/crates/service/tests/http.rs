use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use awi_core::corpus::{build_vocab, synthetic};
use awi_core::{AwiParams, DecodeConfig, ModelDims, Session, StateCarry};
use awi_service::api::{router, AppState, Model};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> Model {
    let vocab = build_vocab(&synthetic::generate(1, 50), 1);
    let dims = ModelDims {
        vocab: vocab.len(),
        embed: 8,
        hidden: 10,
        align: 5,
        layers: 2,
        plain_lstm: false,
    };
    let params = AwiParams::random(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    Model {
        params,
        vocab,
        decode: DecodeConfig::greedy(12),
        carry: StateCarry::Full,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn new_session(app: &Router) -> String {
    let (status, body) = call(app, "POST", "/api/session", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

async fn say(app: &Router, id: &str, text: &str) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/api/session/{id}/message"),
        Some(json!({ "text": text })),
    )
    .await
}

#[tokio::test]
async fn health_reports_model_state() {
    let state = AppState::new(None);
    let app = router(state.clone());
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["model_loaded"], json!(false));
    state.load(model());
    let (_, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(body["model_loaded"], json!(true));
}

#[tokio::test]
async fn sessions_need_a_loaded_model() {
    let state = AppState::new(None);
    let app = router(state.clone());
    let (status, _) = call(&app, "POST", "/api/session", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    state.load(model());
    new_session(&app).await;
}

#[tokio::test]
async fn session_ids_are_distinct() {
    let app = router(AppState::new(Some(model())));
    let mut ids = HashSet::new();
    for _ in 0..20 {
        assert!(ids.insert(new_session(&app).await));
    }
}

#[tokio::test]
async fn message_errors() {
    let app = router(AppState::new(Some(model())));
    let (status, _) = say(&app, "nope", "hello").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let id = new_session(&app).await;
    let (status, _) = say(&app, &id, "   ").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/api/session/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn reply_carries_normalized_attention_and_turn_index() {
    let app = router(AppState::new(Some(model())));
    let id = new_session(&app).await;
    for (k, text) in ["my device shows a red error", "yes", "which error was it"]
        .into_iter()
        .enumerate()
    {
        let (status, body) = say(&app, &id, text).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["turn_index"], json!(k + 1));
        let source = body["source_tokens"].as_array().unwrap();
        let reply = body["reply_tokens"].as_array().unwrap();
        assert_eq!(source.len(), text.split_whitespace().count() + 1);
        let attention = body["attention"].as_array().unwrap();
        assert_eq!(attention.len(), reply.len());
        for row in attention {
            let row: Vec<f64> = row
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            assert_eq!(row.len(), source.len());
            assert!(row.iter().all(|a| *a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(body["reply"].is_string());
    }
}

#[tokio::test]
async fn ten_sessions_keep_independent_state() {
    let m = model();
    let openings: Vec<String> = synthetic::COLORS
        .iter()
        .cycle()
        .take(10)
        .enumerate()
        .map(|(i, c)| format!("{} {}", synthetic::opening(c), "yes ".repeat(i % 3)))
        .collect();
    // Expected replies from isolated local sessions.
    let expected: Vec<(String, String)> = openings
        .iter()
        .map(|o| {
            let mut s = Session::new(&m.params, m.decode);
            let a = s.respond(&m.params, &m.vocab, o).unwrap().text;
            let b = s
                .respond(&m.params, &m.vocab, synthetic::QUESTION)
                .unwrap()
                .text;
            (a, b)
        })
        .collect();
    let distinct: HashSet<&(String, String)> = expected.iter().collect();
    assert!(
        distinct.len() > 1,
        "replies do not depend on the conversation"
    );

    let app = router(AppState::new(Some(m)));
    let mut ids = Vec::new();
    for _ in 0..10 {
        ids.push(new_session(&app).await);
    }
    let mut first = Vec::new();
    for (id, o) in ids.iter().zip(&openings) {
        first.push(
            say(&app, id, o).await.1["reply"]
                .as_str()
                .unwrap()
                .to_string(),
        );
    }
    for (i, id) in ids.iter().enumerate().rev() {
        let second = say(&app, id, synthetic::QUESTION).await.1["reply"]
            .as_str()
            .unwrap()
            .to_string();
        assert_eq!((first[i].clone(), second), expected[i], "session {i}");
    }
}

#[tokio::test]
async fn interleaved_sessions_keep_their_own_transcripts() {
    let app = router(AppState::new(Some(model())));
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    say(&app, &a, "a one").await;
    say(&app, &b, "b one").await;
    say(&app, &a, "a two").await;
    say(&app, &b, "b two").await;
    say(&app, &b, "b three").await;
    for (id, texts) in [
        (&a, vec!["a one", "a two"]),
        (&b, vec!["b one", "b two", "b three"]),
    ] {
        let (status, body) = call(&app, "GET", &format!("/api/session/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["turn_index"], json!(texts.len()));
        let transcript = body["transcript"].as_array().unwrap();
        assert_eq!(transcript.len(), 2 * texts.len());
        for (k, entry) in transcript.iter().enumerate() {
            let speaker = if k % 2 == 0 { "user" } else { "agent" };
            assert_eq!(entry["speaker"], json!(speaker));
            if k % 2 == 0 {
                assert_eq!(entry["text"], json!(texts[k / 2]));
            }
        }
    }
}

#[tokio::test]
async fn concurrent_messages_to_one_session_are_serialized() {
    let app = router(AppState::new(Some(model())));
    let id = new_session(&app).await;
    let (x, y) = tokio::join!(
        say(&app, &id, "first message"),
        say(&app, &id, "second message")
    );
    assert_eq!(x.0, StatusCode::OK);
    assert_eq!(y.0, StatusCode::OK);
    let mut turns = vec![
        x.1["turn_index"].as_u64().unwrap(),
        y.1["turn_index"].as_u64().unwrap(),
    ];
    turns.sort();
    assert_eq!(turns, vec![1, 2]);
    let (_, body) = call(&app, "GET", &format!("/api/session/{id}"), None).await;
    assert_eq!(body["transcript"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn idle_sessions_are_evicted() {
    let state = AppState::with_idle_timeout(Some(model()), Duration::from_secs(60));
    let app = router(Arc::clone(&state));
    let id = new_session(&app).await;
    assert_eq!(state.evict_idle(Instant::now()), 0);
    assert_eq!(
        state.evict_idle(Instant::now() + Duration::from_secs(61)),
        1
    );
    let (status, _) = say(&app, &id, "hello").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
