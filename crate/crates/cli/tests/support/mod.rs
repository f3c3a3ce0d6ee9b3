//! Drives the CLI and the HTTP router in-process.
#![allow(dead_code)]

use std::path::PathBuf;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempdx_core::session::Command;
use tower::ServiceExt;

pub fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

/// A fresh scratch directory under the system temp dir.
pub fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tempdx-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cli(args: &[&str]) -> Output {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = tempdx::run(std::iter::once("tempdx").chain(args.iter().copied()), &mut out, &mut err);
    Output { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

pub fn body_json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

/// Creates a session and runs `cmds` against it; returns the session id.
pub async fn drive(app: &Router, cmds: &[Command]) -> String {
    let mut create = json!({});
    let mut rest = cmds;
    while let Some((first, tail)) = rest.split_first() {
        match first {
            Command::Start { time } => create["time"] = json!(time),
            Command::Truth(t) => create["truth"] = json!(t),
            _ => break,
        }
        rest = tail;
    }
    let (status, body) = send(app, "POST", "/sessions", Some(create)).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let id = body_json(&body)["body"]["id"].as_str().unwrap().to_string();
    for c in rest {
        let (path, payload) = match c {
            Command::Observe { var, state, time } => ("observe", json!({"var": var, "state": state, "time": time})),
            Command::Feedback { var, state, time } => ("feedback", json!({"var": var, "state": state, "time": time})),
            Command::Act { choice } => ("act", json!({"choice": choice})),
            Command::Refine { template } => ("refine", json!({"template": template})),
            Command::Coarsen { template } => ("coarsen", json!({"template": template})),
            Command::Start { .. } | Command::Truth(_) => panic!("session settings after the first event: {c:?}"),
        };
        let (status, body) = send(app, "POST", &format!("/sessions/{id}/{path}"), Some(payload)).await;
        assert_eq!(status, StatusCode::OK, "{path}: {body}");
    }
    id
}
