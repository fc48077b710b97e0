//! HTTP backend for Visual Turing Test sessions.
//!
//! Pools live under a root directory as `{test_kind}/real/*.png` and
//! `{test_kind}/synthetic/*.png`. Sessions are journaled in a separate
//! directory and reloaded on startup.
//!
//! | Method | Path | Body / result |
//! |---|---|---|
//! | POST | `/sessions` | [`CreateRequest`] → [`Created`] |
//! | GET | `/sessions/{id}` | [`SessionStatus`] |
//! | GET | `/sessions/{id}/next` | [`Next`] |
//! | GET | `/sessions/{id}/items/{item}/image` | `image/png` |
//! | POST | `/sessions/{id}/responses` | [`ResponseRequest`] → [`SessionStatus`] |
//! | POST | `/sessions/{id}/finalize` | [`Report`] |
//! | GET | `/sessions/{id}/report` | [`Report`] |
//!
//! Nothing returned before finalization names the ground truth of an item.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cpggan::embed::Label;
use cpggan::vtt::{Report, SessionStatus, SessionStore, TestKind, VttSession};
use cpggan::Error;
use serde::{Deserialize, Serialize};

pub const DEFAULT_N_EACH: usize = 50;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub pool_root: PathBuf,
    pub journal_dir: PathBuf,
    pub allow_revisit: bool,
}

/// Sorted PNG file names per test kind and label, relative to the pool root.
#[derive(Debug, Clone, Default)]
pub struct PoolIndex {
    pools: BTreeMap<(TestKind, &'static str), Vec<String>>,
}

impl PoolIndex {
    pub fn scan(root: &Path) -> std::io::Result<Self> {
        let mut pools = BTreeMap::new();
        for kind in TestKind::ALL {
            for label in ["real", "synthetic"] {
                let dir = root.join(kind.as_str()).join(label);
                let mut names = Vec::new();
                if dir.is_dir() {
                    for entry in fs::read_dir(&dir)? {
                        let name = entry?.file_name().to_string_lossy().into_owned();
                        if name.ends_with(".png") {
                            names.push(format!("{}/{label}/{name}", kind.as_str()));
                        }
                    }
                }
                names.sort();
                pools.insert((kind, label), names);
            }
        }
        Ok(Self { pools })
    }

    pub fn get(&self, kind: TestKind, label: &'static str) -> &[String] {
        self.pools.get(&(kind, label)).map_or(&[], Vec::as_slice)
    }
}

type Shared = Arc<Mutex<VttSession>>;

pub struct AppState {
    config: ServerConfig,
    pools: PoolIndex,
    store: SessionStore,
    sessions: Mutex<HashMap<String, Shared>>,
}

impl AppState {
    /// Indexes the pools and replays every journaled session.
    pub fn open(config: ServerConfig) -> cpggan::Result<Self> {
        let pools = PoolIndex::scan(&config.pool_root)?;
        let store = SessionStore::open(&config.journal_dir)?;
        let mut sessions = HashMap::new();
        for id in store.session_ids()? {
            let s = store.load(&id)?;
            sessions.insert(id, Arc::new(Mutex::new(s)));
        }
        log::info!("loaded {} sessions", sessions.len());
        Ok(Self {
            config,
            pools,
            store,
            sessions: Mutex::new(sessions),
        })
    }

    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Session(_) | Error::Responses(_) => StatusCode::CONFLICT,
            Error::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub test_kind: TestKind,
    #[serde(default)]
    pub n_each: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub test_kind: TestKind,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub item_id: String,
    pub position: usize,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Next {
    pub session_id: String,
    pub total: usize,
    pub answered: usize,
    pub complete: bool,
    pub item: Option<NextItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseRequest {
    pub item_id: String,
    pub label: Label,
}

async fn create(State(app): State<Arc<AppState>>, Json(req): Json<CreateRequest>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let n_each = req.n_each.unwrap_or(DEFAULT_N_EACH);
    let mut table = app.sessions.lock().expect("session table poisoned");
    let id = app.store.fresh_id()?;
    let seed = req.seed.unwrap_or_else(|| cpggan::vtt::now_ms());
    let session = VttSession::create(
        &id,
        app.pools.get(req.test_kind, "real"),
        app.pools.get(req.test_kind, "synthetic"),
        n_each,
        req.test_kind,
        seed,
    )?
    .with_revisit(app.config.allow_revisit);
    app.store.create(&session)?;
    let created = Created {
        session_id: id.clone(),
        test_kind: session.test_kind,
        total: session.len(),
    };
    table.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn status(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionStatus>, ApiError> {
    let s = app.session(&id)?;
    let s = s.lock().expect("session poisoned");
    Ok(Json(s.status()))
}

async fn next(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Next>, ApiError> {
    let s = app.session(&id)?;
    let s = s.lock().expect("session poisoned");
    Ok(Json(Next {
        session_id: s.session_id.clone(),
        total: s.len(),
        answered: s.answered(),
        complete: s.is_complete(),
        item: s.next_item().map(|i| NextItem {
            image_url: format!("/sessions/{}/items/{}/image", s.session_id, i.item_id),
            item_id: i.item_id,
            position: i.position,
        }),
    }))
}

async fn image(State(app): State<Arc<AppState>>, UrlPath((id, item)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let path = {
        let s = app.session(&id)?;
        let s = s.lock().expect("session poisoned");
        let it = s
            .item(&item)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no item {item}")))?;
        app.config.pool_root.join(&it.image)
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot read image: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], bytes).into_response())
}

async fn respond(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ResponseRequest>,
) -> Result<Json<SessionStatus>, ApiError> {
    let s = app.session(&id)?;
    let mut s = s.lock().expect("session poisoned");
    app.store.respond(&mut s, &req.item_id, req.label)?;
    Ok(Json(s.status()))
}

async fn finalize(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Report>, ApiError> {
    let s = app.session(&id)?;
    let mut s = s.lock().expect("session poisoned");
    Ok(Json(app.store.finalize(&mut s)?))
}

async fn report(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Report>, ApiError> {
    let s = app.session(&id)?;
    let s = s.lock().expect("session poisoned");
    Ok(Json(s.final_report()?))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(status))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/items/{item}/image", get(image))
        .route("/sessions/{id}/responses", post(respond))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/report", get(report))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(config: ServerConfig, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let state = AppState::open(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
