use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use rubric_loop_core::gateway::live::LiveBackend;
use rubric_loop_core::gateway::{Gateway, GatewayConfig, GatewayError};
use rubric_loop_core::prompt::PromptText;
use serde_json::{json, Value};

#[derive(Clone)]
struct Script {
    hits: Arc<AtomicUsize>,
    /// Status codes to return before answering normally.
    before: Arc<Vec<u16>>,
}

async fn chat(State(s): State<Script>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = s.hits.fetch_add(1, Ordering::SeqCst);
    if let Some(&code) = s.before.get(n) {
        return (StatusCode::from_u16(code).unwrap(), Json(json!({"error": "try later"})));
    }
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
    let reply = json!({
        "choices": [{
            "message": {"role": "assistant", "content": format!("SUBSCORE a: 1\nTOTAL: 1\n({} chars)", prompt.len())},
            "finish_reason": "stop"
        }],
        "usage": {"prompt_tokens": 12, "completion_tokens": 7}
    });
    (StatusCode::OK, Json(reply))
}

async fn serve(before: Vec<u16>) -> (String, Arc<AtomicUsize>) {
    let hits = Arc::new(AtomicUsize::new(0));
    let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(Script {
        hits: hits.clone(),
        before: Arc::new(before),
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), hits)
}

fn gateway(base_url: String) -> Gateway {
    let mut config = GatewayConfig::live("gpt-4");
    config.base_url = base_url;
    config.backoff_base_ms = 1;
    let backend = LiveBackend::new(&config, Some("test-key".into())).unwrap();
    Gateway::new(Arc::new(backend), config).unwrap()
}

#[tokio::test]
async fn transient_5xx_then_success_reports_two_attempts() {
    let (url, hits) = serve(vec![503]).await;
    let generation = gateway(url).complete(&PromptText::new("hello")).await.unwrap();
    assert_eq!(generation.attempts, 2);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    assert_eq!(generation.raw_text, "SUBSCORE a: 1\nTOTAL: 1\n(5 chars)");
    assert_eq!(generation.token_usage.prompt, 12);
    assert_eq!(generation.token_usage.completion, 7);
    assert_eq!(generation.model_id, "gpt-4");
}

#[tokio::test]
async fn rate_limit_exhausts_after_max_retries() {
    let (url, hits) = serve(vec![429; 10]).await;
    let err = gateway(url).complete(&PromptText::new("hello")).await.unwrap_err();
    assert!(matches!(err, GatewayError::TransientExhausted { attempts: 4, .. }), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}

#[tokio::test]
async fn unauthorized_is_not_retried() {
    let (url, hits) = serve(vec![401, 401]).await;
    let err = gateway(url).complete(&PromptText::new("hello")).await.unwrap_err();
    assert!(matches!(err, GatewayError::AuthFailure { .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn over_budget_prompt_never_reaches_the_server() {
    let (url, hits) = serve(vec![]).await;
    let err = gateway(url).complete(&PromptText::new("x".repeat(32_800))).await.unwrap_err();
    assert_eq!(err, GatewayError::BudgetExceeded { estimate: 8200, budget: 8000 });
    assert_eq!(hits.load(Ordering::SeqCst), 0);
}
