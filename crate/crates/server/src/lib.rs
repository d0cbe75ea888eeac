//! HTTP front for refinement sessions.
//!
//! Geometry and per-point arrays travel as base64 strings inside JSON:
//! positions and colors as little-endian `f32` triplets, labels as `u32`,
//! entropy as `f32`.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use interseg::eval::{miou, Variant};
use interseg::refine::{encode_labels, ClickIssue, InteractionRecord, RefineConfig, RefineError, RoundTrace, SessionExport, WarmupReport};
use interseg::scene::{parse_ply, LabeledCloud, Manifest, ManifestEntry, Split, CLASS_NAMES, CLASS_PALETTE};
use interseg::{NetworkParams, Session};

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<ClickIssue>,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self { status, error, message: message.into(), issues: Vec::new() }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", msg)
    }

    fn internal(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg)
    }
}

impl From<RefineError> for ApiError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::InvalidClicks(issues) => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                error: "invalid_clicks",
                message: "one or more clicks are invalid".into(),
                issues,
            },
            RefineError::Config(msg) => Self::bad_request(msg),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone)]
enum SceneSource {
    Memory(Arc<LabeledCloud>),
    Manifest(Arc<Manifest>, ManifestEntry),
}

impl SceneSource {
    fn load(&self) -> Result<LabeledCloud, ApiError> {
        match self {
            SceneSource::Memory(c) => Ok((**c).clone()),
            SceneSource::Manifest(m, e) => m.load_cloud(e).map_err(|err| ApiError::internal(err.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Idle,
    Refining,
}

struct Slot {
    id: String,
    scene: String,
    created_at: u64,
    has_ground_truth: bool,
    busy: AtomicBool,
    session: Arc<Mutex<Session>>,
}

impl Slot {
    fn handle(&self) -> SessionHandle {
        SessionHandle {
            id: self.id.clone(),
            scene: self.scene.clone(),
            created_at: self.created_at,
            status: if self.busy.load(Ordering::SeqCst) { Status::Refining } else { Status::Idle },
            has_ground_truth: self.has_ground_truth,
        }
    }
}

struct Inner {
    params: NetworkParams,
    refine: RefineConfig,
    scenes: BTreeMap<String, SceneSource>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

/// Shared service state: the checkpoint, the scene catalogue and live sessions.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(params: NetworkParams, refine: RefineConfig) -> Self {
        Self(Arc::new(Inner { params, refine, scenes: BTreeMap::new(), sessions: RwLock::new(HashMap::new()) }))
    }

    fn inner_mut(&mut self) -> &mut Inner {
        Arc::get_mut(&mut self.0).expect("scenes are registered before the state is shared")
    }

    /// Registers an in-memory scene under its own name.
    pub fn with_scene(mut self, cloud: LabeledCloud) -> Self {
        let name = cloud.name.clone();
        self.inner_mut().scenes.insert(name, SceneSource::Memory(Arc::new(cloud)));
        self
    }

    /// Registers the test split of a benchmark manifest; clouds load on demand.
    pub fn with_manifest(mut self, manifest: Manifest) -> Self {
        let manifest = Arc::new(manifest);
        let entries: Vec<ManifestEntry> = manifest.split(Split::Test).cloned().collect();
        for e in entries {
            self.inner_mut().scenes.insert(e.name.clone(), SceneSource::Manifest(manifest.clone(), e));
        }
        self
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.0.sessions.read().expect("lock").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/clicks", post(post_clicks))
        .route("/sessions/{id}/reset", post(reset_session))
        .route("/sessions/{id}/export", get(export_session))
        .route("/scenes", get(list_scenes))
        .route("/classes", get(list_classes))
        .with_state(state)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Name from `GET /scenes`.
    pub scene: Option<String>,
    /// ASCII PLY text, used when `scene` is absent.
    pub ply: Option<String>,
    pub name: Option<String>,
    pub variant: Option<Variant>,
    /// Full refinement configuration; defaults to the service's.
    pub refine: Option<RefineConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    pub scene: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub status: Status,
    pub has_ground_truth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session: SessionHandle,
    pub num_points: usize,
    pub num_classes: usize,
    pub metrics: Option<Metrics>,
    pub warmup: WarmupReport,
}

fn metrics(session: &Session) -> Option<Metrics> {
    let gt = session.cloud().labels.as_deref()?;
    let r = miou(session.labels(), gt, session.params().config.num_classes).ok()?;
    Some(Metrics { miou: r.miou, per_class: r.per_class })
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> R + Send + 'static) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateRequest>) -> ApiResult<CreateResponse> {
    let cloud = match (&req.scene, &req.ply) {
        (Some(name), _) => state.0.scenes.get(name).ok_or_else(|| ApiError::not_found(format!("scene {name}")))?.load()?,
        (None, Some(text)) => {
            let name = req.name.clone().unwrap_or_else(|| "upload".into());
            parse_ply(text, &name).map_err(|e| ApiError::bad_request(e.to_string()))?
        }
        (None, None) => return Err(ApiError::bad_request("need a scene name or a PLY upload")),
    };
    let base = req.refine.clone().unwrap_or_else(|| state.0.refine.clone());
    let cfg = match req.variant {
        Some(v) => v.config(&base),
        None => base,
    };
    cfg.validate()?;
    let params = state.0.params.clone();
    let has_ground_truth = cloud.labels.is_some();
    let scene = cloud.name.clone();
    let (session, warmup) = blocking(move || -> Result<_, ApiError> {
        let mut s = Session::new(cloud, params, cfg)?;
        let w = s.warm_up()?;
        Ok((s, w))
    })
    .await??;
    let resp_metrics = metrics(&session);
    let (num_points, num_classes) = (session.cloud().len(), session.params().config.num_classes);
    let slot = Arc::new(Slot {
        id: uuid::Uuid::new_v4().simple().to_string(),
        scene,
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        has_ground_truth,
        busy: AtomicBool::new(false),
        session: Arc::new(Mutex::new(session)),
    });
    let handle = slot.handle();
    state.0.sessions.write().expect("lock").insert(slot.id.clone(), slot);
    log::info!("session {} on {}", handle.id, handle.scene);
    Ok(Json(CreateResponse { session: handle, num_points, num_classes, metrics: resp_metrics, warmup }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detail {
    #[default]
    Full,
    /// Labels, entropy, clicks and metrics without geometry.
    Labels,
}

#[derive(Debug, Default, Deserialize)]
pub struct StateQuery {
    #[serde(default)]
    pub detail: Detail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session: SessionHandle,
    pub num_points: usize,
    pub num_classes: usize,
    pub interaction: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub colors: Option<String>,
    pub labels: String,
    pub entropy: String,
    pub clicks: Vec<InteractionRecord>,
    pub metrics: Option<Metrics>,
}

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> String {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Option<Vec<f32>> {
    let bytes = STANDARD.decode(text).ok()?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

async fn get_state(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<StateQuery>) -> ApiResult<StateView> {
    let slot = state.slot(&id)?;
    let s = slot.session.lock().await;
    let cloud = s.cloud();
    let full = q.detail == Detail::Full;
    Ok(Json(StateView {
        session: slot.handle(),
        num_points: cloud.len(),
        num_classes: s.params().config.num_classes,
        interaction: s.interaction_round(),
        positions: full.then(|| encode_f32(cloud.positions.iter().flatten().copied())),
        colors: full.then(|| encode_f32((0..cloud.len()).flat_map(|i| cloud.color(i)))),
        labels: encode_labels(s.labels()),
        entropy: encode_f32(s.seg().entropies.iter().copied()),
        clicks: s.clicks().to_vec(),
        metrics: metrics(&s),
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub point_index: usize,
    pub label: u32,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ClicksRequest {
    #[serde(default)]
    pub clicks: Vec<Click>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClicksResponse {
    pub interaction: usize,
    /// Points whose label changed, ascending, with their new labels.
    pub changed: Vec<usize>,
    pub labels: Vec<u32>,
    pub trace: Vec<RoundTrace>,
    pub clicked_accuracy: f64,
    pub metrics: Option<Metrics>,
}

/// Clears the busy flag however the refine ends.
struct BusyGuard(Arc<Slot>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::SeqCst);
    }
}

async fn post_clicks(State(state): State<AppState>, Path(id): Path<String>, Json(req): Json<ClicksRequest>) -> ApiResult<ClicksResponse> {
    let slot = state.slot(&id)?;
    let mut guard = slot
        .session
        .clone()
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "busy", format!("session {id} is refining")))?;
    slot.busy.store(true, Ordering::SeqCst);
    let busy = BusyGuard(slot.clone());
    let clicks: Vec<InteractionRecord> = req.clicks.iter().map(|c| InteractionRecord::human(c.point_index, c.label)).collect();
    let resp = blocking(move || -> Result<ClicksResponse, ApiError> {
        let _busy = busy;
        let out = guard.refine(&clicks)?;
        Ok(ClicksResponse {
            interaction: out.interaction,
            labels: out.changed.iter().map(|&i| guard.labels()[i]).collect(),
            changed: out.changed,
            trace: out.trace,
            clicked_accuracy: out.clicked_accuracy,
            metrics: metrics(&guard),
        })
    })
    .await??;
    Ok(Json(resp))
}

async fn reset_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionHandle> {
    let slot = state.slot(&id)?;
    let mut s = slot
        .session
        .try_lock()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "busy", format!("session {id} is refining")))?;
    s.reset()?;
    Ok(Json(slot.handle()))
}

async fn export_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionExport> {
    let slot = state.slot(&id)?;
    let s = slot.session.lock().await;
    Ok(Json(SessionExport::from_session(&s)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub name: String,
    pub points: usize,
}

async fn list_scenes(State(state): State<AppState>) -> Json<Vec<SceneInfo>> {
    Json(
        state
            .0
            .scenes
            .iter()
            .map(|(name, src)| SceneInfo {
                name: name.clone(),
                points: match src {
                    SceneSource::Memory(c) => c.len(),
                    SceneSource::Manifest(_, e) => e.points,
                },
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub color: [u8; 3],
}

async fn list_classes() -> Json<Vec<ClassInfo>> {
    Json(
        CLASS_NAMES
            .iter()
            .zip(CLASS_PALETTE)
            .enumerate()
            .map(|(i, (name, color))| ClassInfo { id: i as u32, name: (*name).to_string(), color })
            .collect(),
    )
}
