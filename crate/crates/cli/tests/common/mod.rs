//! Helpers shared by the CLI, service and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rubric_loop::service::{router, ServiceState};
use serde_json::Value;
use tower::ServiceExt;

pub const ID: &str = "demo";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").canonicalize().expect("fixtures dir")
}

pub fn fixture(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).expect("fixture readable")
}

pub fn fixture_json(rel: &str) -> Value {
    serde_json::from_str(&read_fixture(rel)).expect("fixture is json")
}

/// Runs the binary against `home` with `-e demo`.
pub fn cli(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rubric-loop"))
        .arg("--home")
        .arg(home)
        .args(["-e", ID])
        .args(args)
        .env_remove("RUBRIC_LOOP_HOME")
        .env_remove("RUBRIC_LOOP_API_KEY")
        .output()
        .expect("binary runs")
}

/// Like [`cli`] but panics unless the exit code matches.
pub fn cli_ok(home: &Path, args: &[&str]) -> String {
    let out = cli(home, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

pub fn manifest(home: &Path) -> String {
    std::fs::read_to_string(home.join("experiment").join(ID).join("MANIFEST")).unwrap_or_default()
}

pub fn init_args() -> Vec<String> {
    vec![
        "init".into(),
        "--rubric".into(),
        fixture("rubric.toml"),
        "--dataset".into(),
        fixture("dataset.jsonl"),
        "--gateway".into(),
        "mock".into(),
    ]
}

pub fn init_cli(home: &Path) {
    let args = init_args();
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    cli_ok(home, &args);
}

pub struct Api {
    pub app: Router,
}

impl Api {
    pub fn new(home: &Path) -> Self {
        Self {
            app: router(ServiceState {
                home: home.to_path_buf(),
                backend: None,
            }),
        }
    }

    pub async fn send(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(match body {
                Some(v) => Body::from(v.to_string()),
                None => Body::empty(),
            })
            .expect("request builds");
        let res = self.app.clone().oneshot(req).await.expect("router answers");
        let status = res.status();
        let bytes = res.into_body().collect().await.expect("body reads").to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.send("GET", uri, None).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.send("POST", uri, Some(body)).await
    }

    /// Posts and panics unless the answer is 200; returns `data`.
    pub async fn post_ok(&self, uri: &str, body: Value) -> Value {
        let (status, v) = self.post(uri, body).await;
        assert_eq!(status, StatusCode::OK, "POST {uri}: {v}");
        v["data"].clone()
    }

    pub async fn get_ok(&self, uri: &str) -> Value {
        let (status, v) = self.get(uri).await;
        assert_eq!(status, StatusCode::OK, "GET {uri}: {v}");
        v["data"].clone()
    }
}

pub fn url(path: &str) -> String {
    format!("/api/v1/experiments/{ID}{path}")
}
