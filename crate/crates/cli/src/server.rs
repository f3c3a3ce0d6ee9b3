//! HTTP API over live sessions.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tempdx_core::kb::KnowledgeBase;
use tempdx_core::report::{Report, SessionSummary};
use tempdx_core::session::{parse_script, replay, script_line, Session, SessionError};

use crate::commands::{recommendation, snapshot_report};

pub struct AppState {
    kb: Arc<KnowledgeBase>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    data_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(kb: Arc<KnowledgeBase>) -> Arc<Self> {
        Arc::new(Self { kb, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1), data_dir: None })
    }

    /// State backed by `data_dir`: every `<id>.log` file there is replayed
    /// into a live session.
    pub fn open(kb: Arc<KnowledgeBase>, data_dir: Option<PathBuf>) -> Result<Arc<Self>, String> {
        let mut sessions = HashMap::new();
        let mut max_id = 0;
        if let Some(dir) = &data_dir {
            std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| e.to_string())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "log"))
                .collect();
            files.sort();
            for path in files {
                let id = path.file_stem().unwrap().to_string_lossy().to_string();
                let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
                let cmds = parse_script(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                let s = replay(kb.clone(), &cmds).map_err(|(i, e)| format!("{}: command {}: {e}", path.display(), i + 1))?;
                if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                    max_id = max_id.max(n);
                }
                sessions.insert(id, Arc::new(Mutex::new(s)));
            }
        }
        Ok(Arc::new(Self { kb, sessions: Mutex::new(sessions), next_id: AtomicU64::new(max_id + 1), data_dir }))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    fn persist(&self, id: &str, text: &str) -> Result<(), ApiError> {
        let Some(dir) = &self.data_dir else { return Ok(()) };
        let path = dir.join(format!("{id}.log"));
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "persistence-failed".into(), message: e.to_string() })
    }
}

pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn not_found(id: &str) -> Self {
        Self { status: StatusCode::NOT_FOUND, code: "unknown-session".into(), message: format!("no session '{id}'") }
    }
}

/// 409 for events the session's current state cannot take, 422 for
/// requests naming things the knowledge base does not have.
pub fn status_for(e: &SessionError) -> StatusCode {
    match e {
        SessionError::UnknownTime(_)
        | SessionError::UnknownVariable(_)
        | SessionError::UnknownState { .. }
        | SessionError::NotObservable(_)
        | SessionError::UnknownTemplate(_)
        | SessionError::BadTruth(_) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::CONFLICT,
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        Self { status: status_for(&e), code: e.code().to_string(), message: e.to_string() }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, code: "bad-request".into(), message: e.body_text() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, ReportBody(Report::error(&self.code, self.message))).into_response()
    }
}

/// A report in the same text form the CLI prints.
pub struct ReportBody(pub Report);

impl IntoResponse for ReportBody {
    fn into_response(self) -> Response {
        ([(header::CONTENT_TYPE, "application/json")], self.0.to_json() + "\n").into_response()
    }
}

type ApiResult = Result<(StatusCode, ReportBody), ApiError>;

fn ok(r: Report) -> ApiResult {
    Ok((StatusCode::OK, ReportBody(r)))
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateBody {
    pub time: Option<String>,
    pub truth: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Deserialize)]
pub struct LiteralBody {
    pub var: String,
    pub state: String,
    pub time: String,
}

#[derive(Debug, Deserialize)]
pub struct ActBody {
    pub choice: String,
}

#[derive(Debug, Deserialize)]
pub struct TemplateBody {
    pub template: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/observe", post(observe))
        .route("/sessions/{id}/act", post(act))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/refine", post(refine))
        .route("/sessions/{id}/coarsen", post(coarsen))
        .route("/sessions/{id}/recommendation", get(recommend))
        .route("/sessions/{id}/diagram", get(diagram))
        .route("/sessions/{id}/log", get(log))
        .route("/sessions/{id}/snapshot", get(snapshot))
        .with_state(state)
}

async fn create(State(app): State<Arc<AppState>>, body: Option<Json<CreateBody>>) -> ApiResult {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let t0 = body.time.or_else(|| app.kb.time_axis.labels.first().cloned()).unwrap_or_default();
    let mut s = Session::new(app.kb.clone(), &t0)?;
    if let Some(truth) = body.truth {
        s.set_truth(truth)?;
    }
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::SeqCst));
    app.persist(&id, &s.script_header())?;
    let summary = SessionSummary::of(&s, Some(&id));
    app.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(s)));
    Ok((StatusCode::CREATED, ReportBody(Report::Session(summary))))
}

/// Applies `f` to the session under its lock and persists the new events.
fn mutate(app: &AppState, id: &str, f: impl FnOnce(&mut Session) -> Result<(), SessionError>) -> ApiResult {
    let cell = app.session(id)?;
    let mut s = cell.lock().unwrap();
    let before = s.log.len();
    f(&mut s)?;
    let lines: String = s.log[before..].iter().map(|e| script_line(e) + "\n").collect();
    app.persist(id, &lines)?;
    ok(Report::Session(SessionSummary::of(&s, Some(id))))
}

fn read<T>(app: &AppState, id: &str, f: impl FnOnce(&Session) -> Result<T, SessionError>) -> Result<T, ApiError> {
    let cell = app.session(id)?;
    let s = cell.lock().unwrap();
    Ok(f(&s)?)
}

async fn observe(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Result<Json<LiteralBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    mutate(&app, &id, |s| s.observe(&b.var, &b.state, &b.time))
}

async fn feedback(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Result<Json<LiteralBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    mutate(&app, &id, |s| s.feedback(&b.var, &b.state, &b.time))
}

async fn act(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Result<Json<ActBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    mutate(&app, &id, |s| s.act(&b.choice))
}

async fn refine(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Result<Json<TemplateBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    mutate(&app, &id, |s| s.refine(&b.template))
}

async fn coarsen(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Result<Json<TemplateBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    mutate(&app, &id, |s| s.coarsen(&b.template))
}

async fn summary(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    ok(read(&app, &id, |s| Ok(Report::Session(SessionSummary::of(s, Some(&id)))))?)
}

async fn recommend(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    ok(read(&app, &id, recommendation)?)
}

async fn diagram(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    ok(read(&app, &id, |s| s.diagram.as_ref().map(|d| Report::Diagram(d.snapshot())).ok_or(SessionError::NoDiagram))?)
}

async fn log(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    ok(read(&app, &id, |s| Ok(Report::Log { events: s.log.clone() }))?)
}

async fn snapshot(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    ok(read(&app, &id, |s| Ok(snapshot_report(s)))?)
}
