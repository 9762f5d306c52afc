//! HTTP interface to simulation sessions, scenarios and history.
//!
//! All mutations go through `POST /sessions/{id}/commands`; `GET .../state`
//! and `GET .../stream` only observe.

mod driver;

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::future::Future;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dbpsim_core::engine::CommandError;
use dbpsim_core::history::HistoricalInstance;
use dbpsim_core::scenario::{Diagnostic, Scenario};
use dbpsim_core::storage::save_history;
use dbpsim_core::view::Cursor;
use dbpsim_core::{load_scenario, HistoryStore, Label, Mode, Session, SimCommand};
use futures::stream::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use driver::Msg;
pub use driver::{CommandAck, SessionHandle, StreamEvent};

/// State shared by all handlers and session tasks.
pub struct Shared {
    scenarios: RwLock<BTreeMap<String, Arc<Scenario>>>,
    sessions: RwLock<HashMap<String, SessionHandle>>,
    pub(crate) history: RwLock<HistoryStore>,
    history_path: Option<PathBuf>,
    next_session: AtomicU64,
}

impl Shared {
    pub(crate) fn record(&self, inst: HistoricalInstance) -> std::io::Result<()> {
        self.history
            .write()
            .expect("history lock")
            .record(inst)
            .map_err(std::io::Error::other)?;
        self.flush_history()
    }

    /// Writes the history file, if one is configured, via a temporary file and rename.
    pub fn flush_history(&self) -> std::io::Result<()> {
        let Some(path) = &self.history_path else {
            return Ok(());
        };
        let text = save_history(&self.history.read().expect("history lock"));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)
    }

    pub fn history(&self) -> std::sync::RwLockReadGuard<'_, HistoryStore> {
        self.history.read().expect("history lock")
    }
}

#[derive(Clone)]
pub struct AppState(pub Arc<Shared>);

impl AppState {
    pub fn new(history: HistoryStore, history_path: Option<PathBuf>) -> AppState {
        AppState(Arc::new(Shared {
            scenarios: RwLock::default(),
            sessions: RwLock::default(),
            history: RwLock::new(history),
            history_path,
            next_session: AtomicU64::new(0),
        }))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/scenarios", post(upload_scenario).get(list_scenarios))
        .route("/scenarios/{id}", get(get_scenario))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/commands", post(post_command))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/stream", get(stream))
        .route("/history", get(list_history))
        .route("/history/metrics", get(history_metrics))
        .route("/history/{id}/label", post(label_instance))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then flushes the history file.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let shared = state.0.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    shared.flush_history()
}

pub enum ApiError {
    NotFound(String),
    Conflict(String),
    Unprocessable {
        message: String,
        diagnostics: Vec<Diagnostic>,
        position: Option<(u32, u32)>,
    },
    Internal(String),
}

impl ApiError {
    fn invalid(message: impl Into<String>) -> Self {
        ApiError::Unprocessable {
            message: message.into(),
            diagnostics: Vec::new(),
            position: None,
        }
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        match &e {
            CommandError::WrongState { .. } => ApiError::Conflict(e.to_string()),
            CommandError::UnknownId { .. } => ApiError::NotFound(e.to_string()),
            CommandError::Invalid { message, pos } => ApiError::Unprocessable {
                message: message.clone(),
                diagnostics: Vec::new(),
                position: pos.map(|p| (p.line, p.column)),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, json!({ "error": m })),
            ApiError::Unprocessable {
                message,
                diagnostics,
                position,
            } => {
                let mut body = json!({ "error": message, "diagnostics": diagnostics });
                if let Some((line, column)) = position {
                    body["line"] = line.into();
                    body["column"] = column.into();
                }
                (StatusCode::UNPROCESSABLE_ENTITY, body)
            }
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (code, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("invalid request body: {e}")))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ScenarioSummary {
    id: String,
    name: String,
    activities: usize,
    rules: usize,
}

fn summary(s: &Scenario) -> ScenarioSummary {
    ScenarioSummary {
        id: s.hash.clone(),
        name: s.name().to_owned(),
        activities: s.activities.len(),
        rules: s.rules.len(),
    }
}

async fn upload_scenario(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<ScenarioSummary>)> {
    let scenario = load_scenario(&body).map_err(|e| ApiError::Unprocessable {
        message: "scenario validation failed".into(),
        diagnostics: e.diagnostics,
        position: None,
    })?;
    let out = summary(&scenario);
    st.0.scenarios
        .write()
        .expect("scenario lock")
        .insert(scenario.hash.clone(), Arc::new(scenario));
    Ok((StatusCode::CREATED, Json(out)))
}

async fn list_scenarios(State(st): State<AppState>) -> Json<Vec<ScenarioSummary>> {
    Json(
        st.0.scenarios
            .read()
            .expect("scenario lock")
            .values()
            .map(|s| summary(s))
            .collect(),
    )
}

fn scenario(st: &AppState, id: &str) -> ApiResult<Arc<Scenario>> {
    st.0.scenarios
        .read()
        .expect("scenario lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("unknown scenario '{id}'")))
}

async fn get_scenario(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = scenario(&st, &id)?;
    Ok(Json(json!({ "id": s.hash, "name": s.name(), "scenario": s.file })))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CreateSession {
    scenario_id: String,
    seed: Option<u64>,
    #[serde(default = "interactive")]
    mode: Mode,
    #[serde(default)]
    step_delay_ms: u64,
}

fn interactive() -> Mode {
    Mode::Interactive
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SessionCreated {
    session_id: String,
    instance_id: String,
    seed: u64,
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let req: CreateSession = parse_json(&body)?;
    let sc = scenario(&st, &req.scenario_id)?;
    let seed = req.seed.unwrap_or_else(|| sc.default_seed());
    let instance_id = st.0.history.write().expect("history lock").allocate_instance_id();
    let session = Session::new(sc, instance_id.clone(), seed, req.mode);
    let n = st.0.next_session.fetch_add(1, Ordering::Relaxed) + 1;
    let session_id = format!("s{n}");
    let handle = driver::spawn(session, st.0.clone(), Duration::from_millis(req.step_delay_ms));
    st.0.sessions
        .write()
        .expect("session lock")
        .insert(session_id.clone(), handle);
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id,
            instance_id,
            seed,
        }),
    ))
}

fn session(st: &AppState, id: &str) -> ApiResult<SessionHandle> {
    st.0.sessions
        .read()
        .expect("session lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("unknown session '{id}'")))
}

async fn ask<T>(h: &SessionHandle, msg: impl FnOnce(oneshot::Sender<T>) -> Msg) -> ApiResult<T> {
    let (tx, rx) = oneshot::channel();
    h.inbox
        .send(msg(tx))
        .await
        .map_err(|_| ApiError::Internal("session task stopped".into()))?;
    rx.await.map_err(|_| ApiError::Internal("session task stopped".into()))
}

async fn post_command(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<CommandAck>> {
    let h = session(&st, &id)?;
    let cmd: SimCommand = parse_json(&body)?;
    let ack = ask(&h, |tx| Msg::Command(cmd, tx)).await??;
    Ok(Json(ack))
}

#[derive(Deserialize)]
struct StateQuery {
    since: Option<String>,
}

async fn get_state(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<StateQuery>,
) -> ApiResult<Json<dbpsim_core::view::StateView>> {
    let h = session(&st, &id)?;
    let since = q
        .since
        .map(|s| s.parse::<Cursor>())
        .transpose()
        .map_err(ApiError::invalid)?;
    Ok(Json(ask(&h, |tx| Msg::View(since, tx)).await?))
}

async fn stream(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let h = session(&st, &id)?;
    let rx = h.events.subscribe();
    let events = futures::stream::unfold(rx, |mut rx| async move {
        use tokio::sync::broadcast::error::RecvError;
        let event = match rx.recv().await {
            Ok(ev) => {
                let kind = serde_json::to_value(&ev.event)
                    .ok()
                    .and_then(|v| v["kind"].as_str().map(str::to_owned))
                    .unwrap_or_else(|| "message".into());
                let data = serde_json::to_string(&ev).unwrap_or_default();
                Event::default().id(ev.seq.to_string()).event(kind).data(data)
            }
            Err(RecvError::Lagged(n)) => Event::default()
                .event("lagged")
                .data(json!({ "missed": n }).to_string()),
            Err(RecvError::Closed) => return None,
        };
        Some((Ok(event), rx))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct HistoryQuery {
    scenario_hash: Option<String>,
}

async fn list_history(State(st): State<AppState>, Query(q): Query<HistoryQuery>) -> Json<Vec<HistoricalInstance>> {
    let h = st.0.history();
    let out = match &q.scenario_hash {
        Some(hash) => h.scenario(hash).cloned().collect(),
        None => h.instances().to_vec(),
    };
    Json(out)
}

async fn history_metrics(
    State(st): State<AppState>,
    Query(q): Query<HistoryQuery>,
) -> ApiResult<Json<dbpsim_core::history::Metrics>> {
    let hash = q
        .scenario_hash
        .ok_or_else(|| ApiError::invalid("missing query parameter 'scenarioHash'"))?;
    Ok(Json(st.0.history().metrics(&hash)))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct LabelRequest {
    label: String,
    #[serde(default)]
    actor: Option<String>,
}

pub fn parse_label(s: &str) -> Option<Label> {
    match s {
        "good" | "goodPractice" => Some(Label::GoodPractice),
        "bad" | "badPractice" => Some(Label::BadPractice),
        "unlabeled" => Some(Label::Unlabeled),
        _ => None,
    }
}

async fn label_instance(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<HistoricalInstance>> {
    let req: LabelRequest = parse_json(&body)?;
    let label = parse_label(&req.label)
        .ok_or_else(|| ApiError::invalid(format!("unknown label '{}' (good|bad|unlabeled)", req.label)))?;
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let inst = {
        let mut h = st.0.history.write().expect("history lock");
        h.label(&id, label, req.actor.as_deref().unwrap_or("api"), now)
            .map_err(|e| ApiError::NotFound(e.to_string()))?;
        h.get(&id).cloned().expect("labelled instance exists")
    };
    st.0.flush_history().map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(inst))
}
