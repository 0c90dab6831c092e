//! HTTP labeling service. Each concept gets one session: an engine thread
//! whose labeler blocks until a human answers through the API. Answers reach
//! the engine through a single channel, so the engine is the only writer of
//! its own state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use seals_core::engine::{Engine, Labeler, LabelerError, ReplayLabeler, RoundRecord, RunSpec};
use seals_core::experiment::{config_fingerprint, Workspace};
use seals_core::rng::{derive_seed, hash_str};
use seals_core::store::{build_seed, Label, LabeledSet, RowSet};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;
use tower_http::services::ServeDir;

use crate::commands::{CliError, Inputs};

#[derive(Debug, Default)]
struct Progress {
    pending: Option<usize>,
    labeled: RowSet,
    /// Answers given since the seed, in order.
    answers: Vec<(usize, Label)>,
    labels_spent: usize,
    positives_found: usize,
    records: Vec<RoundRecord>,
    finished: bool,
    error: Option<String>,
}

struct Shared {
    progress: Mutex<Progress>,
    version: watch::Sender<u64>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Progress> {
        self.progress.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn update(&self, f: impl FnOnce(&mut Progress)) {
        f(&mut self.lock());
        self.version.send_modify(|v| *v += 1);
    }
}

/// Labeler that publishes the requested row and waits for the answer.
struct ChannelLabeler {
    shared: Arc<Shared>,
    answers: mpsc::Receiver<(usize, Label)>,
}

impl Labeler for ChannelLabeler {
    fn label(&mut self, row: usize) -> Result<Label, LabelerError> {
        self.shared.update(|p| p.pending = Some(row));
        match self.answers.recv() {
            Ok((r, label)) if r == row => Ok(label),
            Ok((r, _)) => Err(LabelerError::Failed(format!("answer for row {r}, expected {row}"))),
            Err(_) => Err(LabelerError::Closed),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SessionCheckpoint {
    fingerprint: u64,
    concept: String,
    answers: Vec<(usize, Label)>,
}

struct Session {
    concept: String,
    strategy: String,
    batch_size: usize,
    budget: usize,
    fingerprint: u64,
    checkpoint_path: PathBuf,
    ws: Arc<Workspace>,
    shared: Arc<Shared>,
    answers: Mutex<mpsc::Sender<(usize, Label)>>,
}

impl Session {
    fn start(
        inputs: &Inputs,
        ws: Arc<Workspace>,
        concept: &str,
        checkpoint_dir: &Path,
    ) -> Result<Self, CliError> {
        let cfg = &inputs.config;
        let exps = cfg.experiments()?;
        let exp = match exps.as_slice() {
            [e] => e.clone(),
            _ => {
                return Err(seals_core::experiment::ConfigError::Schema(
                    "serve needs exactly one strategy".into(),
                )
                .into())
            }
        };
        let fingerprint = derive_seed(config_fingerprint(cfg), &[hash_str(&exp.name), hash_str(concept)]);
        let checkpoint_path = checkpoint_dir.join(format!("{concept}.json"));
        let replay = read_session_checkpoint(&checkpoint_path, fingerprint)?;

        let seed = build_seed(&ws.dataset, &cfg.seed_spec(concept, 0))?;
        let spec = cfg.run_spec(&exp, concept, 0);
        let mut progress = Progress {
            labeled: RowSet::with_capacity(ws.dataset.len()),
            ..Progress::default()
        };
        for &(row, label) in seed.entries().iter().chain(&replay) {
            progress.labeled.insert(row);
            progress.labels_spent += 1;
            progress.positives_found += label.is_positive() as usize;
        }
        progress.answers = replay.clone();
        let shared = Arc::new(Shared {
            progress: Mutex::new(progress),
            version: watch::Sender::new(0),
        });
        let (tx, rx) = mpsc::channel();
        let labeler = ReplayLabeler::new(
            replay,
            ChannelLabeler {
                shared: shared.clone(),
                answers: rx,
            },
        );
        spawn_engine(ws.clone(), spec, concept.to_string(), seed, labeler, shared.clone());
        Ok(Self {
            concept: concept.to_string(),
            strategy: exp.name,
            batch_size: cfg.batch_size,
            budget: cfg.budget,
            fingerprint,
            checkpoint_path,
            ws,
            shared,
            answers: Mutex::new(tx),
        })
    }

    fn item(&self, row: usize) -> Item {
        Item {
            row_id: row,
            external_id: self.ws.dataset.id(row).to_string(),
            payload_uri: self.ws.dataset.payload(row).map(String::from),
        }
    }
}

fn spawn_engine(
    ws: Arc<Workspace>,
    spec: RunSpec,
    concept: String,
    seed: LabeledSet,
    mut labeler: ReplayLabeler<ChannelLabeler>,
    shared: Arc<Shared>,
) {
    std::thread::Builder::new()
        .name(format!("engine-{concept}"))
        .spawn(move || {
            let mut engine = Engine::new(&spec, &ws.dataset).with_index(&*ws.index);
            if let Some(e) = ws.eval_for(&concept) {
                engine = engine.with_eval(e);
            }
            let observer_shared = shared.clone();
            let result = engine.run(seed, &mut labeler, &mut |r| {
                observer_shared.update(|p| p.records.push(r.clone()));
            });
            shared.update(|p| {
                p.pending = None;
                p.finished = true;
                match result {
                    Ok(_) => log::info!("session {concept} finished"),
                    Err(e) => {
                        log::warn!("session {concept} stopped: {e}");
                        p.error = Some(e.to_string());
                    }
                }
            });
        })
        .expect("spawn engine thread");
}

fn read_session_checkpoint(path: &Path, fingerprint: u64) -> Result<Vec<(usize, Label)>, CliError> {
    let corrupt = |reason: String| {
        CliError::Experiment(seals_core::experiment::ExperimentError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(corrupt(e.to_string())),
    };
    let cp: SessionCheckpoint = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if cp.fingerprint != fingerprint {
        return Err(corrupt("written by a different config".into()));
    }
    log::info!("resuming {} from {} answers", cp.concept, cp.answers.len());
    Ok(cp.answers)
}

/// All sessions of one service, keyed by concept.
#[derive(Clone)]
pub struct AppState {
    sessions: Arc<BTreeMap<String, Session>>,
    default_concept: String,
    next_timeout: Duration,
}

impl AppState {
    /// Loads the data and starts one engine per configured concept.
    /// Sessions saved under `checkpoint_dir` are resumed.
    pub fn new(inputs: &Inputs, checkpoint_dir: &Path) -> Result<Self, CliError> {
        let ws = Arc::new(inputs.workspace()?);
        let concepts = inputs.concepts(&ws.dataset)?;
        let default_concept = concepts
            .first()
            .cloned()
            .ok_or_else(|| CliError::Input("no concepts to label".into()))?;
        let mut sessions = BTreeMap::new();
        for c in &concepts {
            sessions.insert(c.clone(), Session::start(inputs, ws.clone(), c, checkpoint_dir)?);
        }
        Ok(Self {
            sessions: Arc::new(sessions),
            default_concept,
            next_timeout: Duration::from_millis(inputs.config.serve.next_timeout_ms),
        })
    }
}

/// The API routes, plus static assets at `/` when a directory is given.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/next", get(get_next))
        .route("/api/label", post(post_label))
        .route("/api/metrics", get(get_metrics))
        .route("/api/checkpoint", post(post_checkpoint))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Deserialize)]
struct Select {
    concept: Option<String>,
    timeout_ms: Option<u64>,
}

fn session<'a>(state: &'a AppState, q: &Select) -> ApiResult<&'a Session> {
    let name = q.concept.as_deref().unwrap_or(&state.default_concept);
    state
        .sessions
        .get(name)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no session for concept {name}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub row_id: usize,
    pub external_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub concept: String,
    pub concepts: Vec<String>,
    pub strategy: String,
    pub batch_size: usize,
    pub budget: usize,
    pub labels_spent: usize,
    pub positives_found: usize,
    pub pool_fraction: Option<f64>,
    pub done: bool,
    pub error: Option<String>,
    pub current: Option<Item>,
}

async fn get_session(State(state): State<AppState>, Query(q): Query<Select>) -> ApiResult<Json<SessionView>> {
    let s = session(&state, &q)?;
    let p = s.shared.lock();
    Ok(Json(SessionView {
        concept: s.concept.clone(),
        concepts: state.sessions.keys().cloned().collect(),
        strategy: s.strategy.clone(),
        batch_size: s.batch_size,
        budget: s.budget,
        labels_spent: p.labels_spent,
        positives_found: p.positives_found,
        pool_fraction: p.records.last().map(|r| r.pool_fraction),
        done: p.finished,
        error: p.error.clone(),
        current: p.pending.map(|r| s.item(r)),
    }))
}

/// Waits for the engine to ask for a label, or to finish.
async fn get_next(State(state): State<AppState>, Query(q): Query<Select>) -> ApiResult<Response> {
    let s = session(&state, &q)?;
    let wait = q
        .timeout_ms
        .map(Duration::from_millis)
        .map_or(state.next_timeout, |t| t.min(state.next_timeout));
    let deadline = tokio::time::Instant::now() + wait;
    let mut changes = s.shared.version.subscribe();
    loop {
        {
            let p = s.shared.lock();
            if let Some(row) = p.pending {
                return Ok(Json(s.item(row)).into_response());
            }
            if let Some(e) = &p.error {
                return Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.clone()));
            }
            if p.finished {
                return Ok(Json(json!({ "done": true })).into_response());
            }
        }
        match tokio::time::timeout_at(deadline, changes.changed()).await {
            Ok(Ok(())) => continue,
            Ok(Err(_)) => return Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, "session closed".into())),
            Err(_) => {
                return Err(ApiError(
                    StatusCode::GATEWAY_TIMEOUT,
                    "no item selected within the timeout".into(),
                ))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    row_id: usize,
    label: Label,
}

async fn post_label(State(state): State<AppState>, Query(q): Query<Select>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state, &q)?;
    let body: LabelBody =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))?;
    let conflict = |m: String| Err(ApiError(StatusCode::CONFLICT, m));
    let mut p = s.shared.lock();
    if body.row_id >= s.ws.dataset.len() {
        return conflict(format!("unknown row {}", body.row_id));
    }
    if p.labeled.contains(body.row_id) {
        return conflict(format!("row {} is already labeled", body.row_id));
    }
    if p.pending != Some(body.row_id) {
        return conflict(format!("row {} is not awaiting a label", body.row_id));
    }
    let sent = s
        .answers
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .send((body.row_id, body.label));
    if sent.is_err() {
        return Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, "engine stopped".into()));
    }
    p.pending = None;
    p.labeled.insert(body.row_id);
    p.answers.push((body.row_id, body.label));
    p.labels_spent += 1;
    p.positives_found += body.label.is_positive() as usize;
    let reply = json!({ "labels_spent": p.labels_spent, "positives_found": p.positives_found });
    drop(p);
    s.shared.version.send_modify(|v| *v += 1);
    Ok(Json(reply))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub concept: String,
    pub labels_spent: usize,
    pub positives_found: usize,
    pub records: Vec<RoundRecord>,
}

async fn get_metrics(State(state): State<AppState>, Query(q): Query<Select>) -> ApiResult<Json<MetricsView>> {
    let s = session(&state, &q)?;
    let p = s.shared.lock();
    Ok(Json(MetricsView {
        concept: s.concept.clone(),
        labels_spent: p.labels_spent,
        positives_found: p.positives_found,
        records: p.records.clone(),
    }))
}

async fn post_checkpoint(State(state): State<AppState>, Query(q): Query<Select>) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state, &q)?;
    let cp = SessionCheckpoint {
        fingerprint: s.fingerprint,
        concept: s.concept.clone(),
        answers: s.shared.lock().answers.clone(),
    };
    let internal = |e: std::io::Error| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    if let Some(dir) = s.checkpoint_path.parent() {
        fs::create_dir_all(dir).map_err(internal)?;
    }
    let tmp = s.checkpoint_path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec(&cp).expect("checkpoint serializes")).map_err(internal)?;
    fs::rename(&tmp, &s.checkpoint_path).map_err(internal)?;
    Ok(Json(json!({
        "path": s.checkpoint_path.display().to_string(),
        "answers": cp.answers.len(),
    })))
}
