mod support;

use std::sync::Arc;

use axum::http::StatusCode;
use serde_json::json;
use support::{body_json, cli, drive, fixture, scratch, send};
use tempdx::server::{router, AppState};
use tempdx_core::kb::parse_kb;
use tempdx_core::session::parse_script;

fn kb(name: &str) -> Arc<tempdx_core::kb::KnowledgeBase> {
    Arc::new(parse_kb(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap())
}

#[tokio::test]
async fn recommendation_matches_the_cli() {
    let app = router(AppState::new(kb("abdominal.kb")));
    let (status, body) = send(&app, "POST", "/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = body_json(&body)["body"]["id"].as_str().unwrap().to_string();
    for lit in [("N", "yes"), ("P", "yes")] {
        let (status, _) = send(&app, "POST", &format!("/sessions/{id}/observe"), Some(json!({"var": lit.0, "state": lit.1, "time": "t1"}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, body) = send(&app, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    assert_eq!(status, StatusCode::OK);
    let out = cli(&["diagnose", &fixture("abdominal.kb"), "--obs", "N=yes,P=yes", "--time", "t1"]);
    assert_eq!(body, out.stdout);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let app = router(AppState::new(kb("abdominal.kb")));
    let (status, body) = send(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body_json(&body)["body"]["code"], "unknown-session");

    let (_, body) = send(&app, "POST", "/sessions", Some(json!({"time": "t2"}))).await;
    let id = body_json(&body)["body"]["id"].as_str().unwrap().to_string();
    let observe = format!("/sessions/{id}/observe");

    let (status, body) = send(&app, "POST", &observe, Some(json!({"var": "N", "state": "yes", "time": "t1"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body_json(&body)["body"]["code"], "time-regression");

    let (status, body) = send(&app, "POST", &observe, Some(json!({"var": "Q", "state": "yes", "time": "t2"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body_json(&body)["body"]["code"], "unknown-variable");

    let (status, body) = send(&app, "POST", &observe, Some(json!({"var": "N"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body_json(&body)["body"]["code"], "bad-request");

    let (status, body) = send(&app, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body_json(&body)["body"]["code"], "no-diagram");

    let (status, body) = send(&app, "POST", &format!("/sessions/{id}/feedback"), Some(json!({"var": "N", "state": "yes", "time": "t2"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body_json(&body)["body"]["code"], "no-decision");

    let (status, _) = send(&app, "POST", "/sessions", Some(json!({"time": "t9"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn reads_expose_log_diagram_and_summary() {
    let app = router(AppState::new(kb("abdominal.kb")));
    let script = std::fs::read_to_string(fixture("appendicitis_session.txt")).unwrap();
    let id = drive(&app, &parse_script(&script).unwrap()).await;
    let (_, body) = send(&app, "GET", &format!("/sessions/{id}"), None).await;
    let summary = body_json(&body);
    assert_eq!(summary["kind"], "session");
    assert_eq!(summary["body"]["decisions"].as_array().unwrap().len(), 1);
    let (_, body) = send(&app, "GET", &format!("/sessions/{id}/log"), None).await;
    assert_eq!(body_json(&body)["body"]["events"].as_array().unwrap().len(), 4);
    let (_, body) = send(&app, "GET", &format!("/sessions/{id}/diagram"), None).await;
    assert_eq!(body_json(&body)["kind"], "diagram");
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = scratch("persist");
    let kb = kb("abdominal.kb");
    let script = std::fs::read_to_string(fixture("appendicitis_session.txt")).unwrap();
    let app = router(AppState::open(kb.clone(), Some(dir.clone())).unwrap());
    let id = drive(&app, &parse_script(&script).unwrap()).await;
    // A rejected command leaves no trace in the log.
    let (status, _) = send(&app, "POST", &format!("/sessions/{id}/observe"), Some(json!({"var": "N", "state": "yes", "time": "t1"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, before) = send(&app, "GET", &format!("/sessions/{id}/snapshot"), None).await;

    let restarted = router(AppState::open(kb, Some(dir.clone())).unwrap());
    let (status, after) = send(&restarted, "GET", &format!("/sessions/{id}/snapshot"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after, before);
    let (_, body) = send(&restarted, "POST", "/sessions", None).await;
    assert_ne!(body_json(&body)["body"]["id"], json!(id));
    let _ = std::fs::remove_dir_all(dir);
}

#[tokio::test]
async fn concurrent_writers_are_serialized() {
    let app = router(AppState::new(kb("car.kb")));
    let (_, body) = send(&app, "POST", "/sessions", None).await;
    let id = body_json(&body)["body"]["id"].as_str().unwrap().to_string();
    let mut tasks = tokio::task::JoinSet::new();
    for i in 0..12 {
        let (app, uri) = (app.clone(), format!("/sessions/{id}/observe"));
        let state = if i % 2 == 0 { "wet" } else { "dry" };
        tasks.spawn(async move { send(&app, "POST", &uri, Some(json!({"var": "W", "state": state, "time": "t1"}))).await.0 });
    }
    while let Some(status) = tasks.join_next().await {
        assert_eq!(status.unwrap(), StatusCode::OK);
    }
    let (_, body) = send(&app, "GET", &format!("/sessions/{id}/log"), None).await;
    let seqs: Vec<u64> = body_json(&body)["body"]["events"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=12).collect::<Vec<_>>());
}
