//! Annotation-collection HTTP server.
//!
//! Accepted submissions are appended to a JSON Lines log through a single
//! writer and synced to disk before the client sees `{"accepted": true}`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mintiqa::dataset::Dataset;
use mintiqa::levels::{Factor, LevelVocabularies, Perspective};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{json, Value};

pub const MAX_SCORE: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub out: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: String,
    pub subject_id: String,
    pub seed: u64,
    pub items: Vec<String>,
    pub cursor: usize,
}

pub struct AppState {
    dataset: Dataset,
    levels: LevelVocabularies,
    base_seed: u64,
    next_session: AtomicU64,
    sessions: Mutex<HashMap<String, Session>>,
    log_path: PathBuf,
    log: Mutex<File>,
    static_dir: Option<PathBuf>,
}

/// Seed of the `n`-th session, derived from the server seed.
pub fn session_seed(base: u64, n: u64) -> u64 {
    // splitmix64 finalizer keeps neighbouring sessions decorrelated.
    let mut z = base ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl AppState {
    pub fn new(dataset: Dataset, out: &Path, static_dir: Option<PathBuf>, seed: u64) -> anyhow::Result<Self> {
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(out)
            .with_context(|| format!("opening ratings log {}", out.display()))?;
        Ok(Self {
            dataset,
            levels: LevelVocabularies::default(),
            base_seed: seed,
            next_session: AtomicU64::new(1),
            sessions: Mutex::new(HashMap::new()),
            log_path: out.to_owned(),
            log: Mutex::new(log),
            static_dir,
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", get(new_session))
        .route("/api/session/{sid}/item/{i}", get(get_item))
        .route("/api/session/{sid}/item/{i}/rating", post(post_rating))
        .route("/api/export", get(export))
        .route("/images/{image_id}", get(image))
        .route("/static/{*path}", get(static_file))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(dataset: Dataset, cfg: ServerConfig) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(cfg.bind)
        .await
        .with_context(|| format!("binding {}", cfg.bind))?;
    log::info!("annotation server listening on {}", listener.local_addr()?);
    let state = Arc::new(AppState::new(dataset, &cfg.out, cfg.static_dir, cfg.seed)?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
struct SessionQuery {
    subject_id: String,
}

async fn new_session(State(st): State<Arc<AppState>>, Query(q): Query<SessionQuery>) -> Response {
    if q.subject_id.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "subject_id must not be empty");
    }
    let n = st.next_session.fetch_add(1, Ordering::SeqCst);
    let seed = session_seed(st.base_seed, n);
    let mut items: Vec<String> = st.dataset.images.iter().map(|i| i.image_id.clone()).collect();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let session = Session {
        session_id: n.to_string(),
        subject_id: q.subject_id,
        seed,
        items,
        cursor: 0,
    };
    let body = json!({ "session_id": session.session_id, "n_items": session.items.len() });
    st.sessions
        .lock()
        .expect("session lock")
        .insert(session.session_id.clone(), session);
    Json(body).into_response()
}

#[derive(Serialize)]
struct Question {
    id: &'static str,
    text: &'static str,
    options: Vec<String>,
}

/// Looks up the image id at position `i` of a session and moves its cursor there.
#[allow(clippy::result_large_err)]
fn locate(st: &AppState, sid: &str, i: usize) -> Result<(String, Session), Response> {
    let mut sessions = st.sessions.lock().expect("session lock");
    let s = sessions
        .get_mut(sid)
        .ok_or_else(|| error(StatusCode::NOT_FOUND, format!("unknown session {sid}")))?;
    let id = s
        .items
        .get(i)
        .cloned()
        .ok_or_else(|| error(StatusCode::NOT_FOUND, format!("item {i} outside 0..{}", s.items.len())))?;
    s.cursor = i;
    Ok((id, s.clone()))
}

async fn get_item(State(st): State<Arc<AppState>>, UrlPath((sid, i)): UrlPath<(String, usize)>) -> Response {
    let (image_id, _) = match locate(&st, &sid, i) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let prompt_text = st
        .dataset
        .image(&image_id)
        .and_then(|img| st.dataset.prompt(&img.prompt_id))
        .map(|p| p.raw_text.clone())
        .unwrap_or_default();
    let questions: Vec<Question> = Factor::ALL
        .iter()
        .map(|&f| Question {
            id: f.id(),
            text: f.question(),
            options: st.levels.get(f).to_vec(),
        })
        .collect();
    Json(json!({
        "image_url": format!("/images/{image_id}"),
        "prompt_text": prompt_text,
        "perspectives": Perspective::ALL.iter().map(|p| p.as_str()).collect::<Vec<_>>(),
        "questions": questions,
    }))
    .into_response()
}

/// Field-level problems with a rating body; empty when the body is acceptable.
pub fn validate_rating(body: &Value, levels: &LevelVocabularies) -> BTreeMap<String, String> {
    let mut errors = BTreeMap::new();
    let Some(obj) = body.as_object() else {
        errors.insert("body".into(), "must be a JSON object".into());
        return errors;
    };
    match obj.get("scores").and_then(Value::as_object) {
        None => {
            errors.insert("scores".into(), "missing object".into());
        }
        Some(scores) => {
            for p in Perspective::ALL {
                let key = format!("scores.{}", p.as_str());
                match scores.get(p.as_str()).and_then(Value::as_f64) {
                    None => {
                        errors.insert(key, "missing number".into());
                    }
                    Some(v) if !(0.0..=MAX_SCORE).contains(&v) => {
                        errors.insert(key, format!("{v} outside [0, {MAX_SCORE}]"));
                    }
                    Some(_) => {}
                }
            }
            for k in scores.keys().filter(|k| Perspective::parse(k).is_none()) {
                errors.insert(format!("scores.{k}"), "unknown perspective".into());
            }
        }
    }
    match obj.get("choices").and_then(Value::as_object) {
        None => {
            errors.insert("choices".into(), "missing object".into());
        }
        Some(choices) => {
            for f in Factor::ALL {
                let key = format!("choices.{}", f.id());
                match choices.get(f.id()).and_then(Value::as_str) {
                    None => {
                        errors.insert(key, "missing choice".into());
                    }
                    Some(c) if !levels.contains(f, c) => {
                        errors.insert(key, format!("`{c}` is not an option"));
                    }
                    Some(_) => {}
                }
            }
        }
    }
    if !obj.get("explanation").is_some_and(Value::is_string) {
        errors.insert("explanation".into(), "missing string".into());
    }
    errors
}

#[derive(Serialize)]
struct LogRecord<'a> {
    session_id: &'a str,
    subject_id: &'a str,
    image_id: &'a str,
    item: usize,
    session_seed: u64,
    payload: &'a RawValue,
}

async fn post_rating(
    State(st): State<Arc<AppState>>,
    UrlPath((sid, i)): UrlPath<(String, usize)>,
    body: Bytes,
) -> Response {
    let (image_id, session) = match locate(&st, &sid, i) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let Ok(text) = std::str::from_utf8(&body) else {
        return error(StatusCode::BAD_REQUEST, "body is not UTF-8");
    };
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}")),
    };
    let errors = validate_rating(&value, &st.levels);
    if !errors.is_empty() {
        return (
            StatusCode::BAD_REQUEST,
            Json(json!({ "accepted": false, "errors": errors })),
        )
            .into_response();
    }
    // Line breaks can only be insignificant whitespace in valid JSON; dropping them keeps one record per line.
    let single_line: String = text
        .trim()
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    let raw = RawValue::from_string(single_line).expect("validated JSON stays valid");
    let record = LogRecord {
        session_id: &session.session_id,
        subject_id: &session.subject_id,
        image_id: &image_id,
        item: i,
        session_seed: session.seed,
        payload: &raw,
    };
    let mut line = serde_json::to_vec(&record).expect("record serializes");
    line.push(b'\n');
    let written = {
        let mut log = st.log.lock().expect("log lock");
        log.write_all(&line).and_then(|()| log.sync_data())
    };
    match written {
        Ok(()) => Json(json!({ "accepted": true })).into_response(),
        Err(e) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("could not persist rating: {e}"),
        ),
    }
}

async fn export(State(st): State<Arc<AppState>>) -> Response {
    // Holding the writer lock guarantees no half-written record is read.
    let bytes = {
        let _guard = st.log.lock().expect("log lock");
        std::fs::read(&st.log_path)
    };
    match bytes {
        Ok(b) => ([(header::CONTENT_TYPE, "application/x-ndjson")], b).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: PathBuf) -> Response {
    match tokio::fs::read(&path).await {
        Ok(b) => ([(header::CONTENT_TYPE, content_type(&path))], b).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not found"),
    }
}

async fn image(State(st): State<Arc<AppState>>, UrlPath(image_id): UrlPath<String>) -> Response {
    match st.dataset.image(&image_id) {
        Some(img) => send_file(st.dataset.image_path(img)).await,
        None => error(StatusCode::NOT_FOUND, format!("unknown image {image_id}")),
    }
}

async fn static_file(State(st): State<Arc<AppState>>, UrlPath(path): UrlPath<String>) -> Response {
    let Some(root) = &st.static_dir else {
        return error(StatusCode::NOT_FOUND, "no UI bundle configured");
    };
    let rel = Path::new(&path);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(StatusCode::BAD_REQUEST, "invalid path");
    }
    send_file(root.join(rel)).await
}
