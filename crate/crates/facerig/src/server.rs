//! HTTP interface for the editing UI.
//!
//! Each project is cached in memory as an immutable snapshot behind an
//! `Arc`. Readers clone the `Arc`; writers serialize on a per-project lock,
//! persist the new state and then swap the snapshot, so a reader never sees
//! a half-applied edit and a crash never leaves a half-written file.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facerig_core::adapter::{AdapterNet, Checkpoint, TrainConfig};
use facerig_core::datagen::{GeneratedDataset, RuleSet, SamplePair};
use facerig_core::hitl::{assemble_finetune_set, finetune, FinetuneConfig, FinetuneReport};
use facerig_core::rig::Diagnostic;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::project::{
    self, AdjustRequest, AppError, AppResult, Assets, ProjectState, Status, Store, Upload,
};

/// Uploads carry the full rig and model inline.
const MAX_BODY_BYTES: usize = 1 << 30;

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        use facerig_core::Error as E;
        let status = match &self {
            AppError::BadRequest { .. } | AppError::Invalid(_) => StatusCode::BAD_REQUEST,
            AppError::NotFound(_) => StatusCode::NOT_FOUND,
            AppError::Conflict(_) => StatusCode::CONFLICT,
            AppError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            AppError::Core(e) => match e {
                E::Io(_) | E::File { .. } => StatusCode::INTERNAL_SERVER_ERROR,
                E::DegenerateGeometry(_)
                | E::IllConditioned
                | E::Diverged { .. }
                | E::DatasetQuality { .. }
                | E::Frame { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::BAD_REQUEST,
            },
        };
        (status, Json(self.report())).into_response()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> AppResult<T> {
    serde_json::from_slice(body).map_err(|e| AppError::bad("body", e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> AppResult<T> + Send + 'static,
) -> AppResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::Internal(format!("worker task failed: {e}")))?
}

struct Project {
    assets: Arc<Assets>,
    state: RwLock<Arc<ProjectState>>,
    net: RwLock<Arc<AdapterNet>>,
    /// Held for the whole read-modify-persist-swap of a mutation.
    write: tokio::sync::Mutex<()>,
    /// Id of the running finetune job.
    job: Mutex<Option<String>>,
}

impl Project {
    fn snapshot(&self) -> Arc<ProjectState> {
        self.state.read().expect("state lock").clone()
    }

    fn net(&self) -> Arc<AdapterNet> {
        self.net.read().expect("net lock").clone()
    }

    fn running_job(&self) -> Option<String> {
        self.job.lock().expect("job lock").clone()
    }

    fn status(&self) -> Status {
        if self.running_job().is_some() {
            Status::Finetuning
        } else {
            self.snapshot().status
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Created,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub project: String,
    pub status: JobStatus,
    pub created_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<FinetuneReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

pub struct AppState {
    store: Store,
    projects: Mutex<HashMap<String, Arc<Project>>>,
    jobs: Mutex<HashMap<String, Job>>,
}

type Shared = Arc<AppState>;

impl AppState {
    pub fn new(store: Store) -> Shared {
        Arc::new(Self {
            store,
            projects: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
        })
    }

    async fn project(&self, id: &str) -> AppResult<Arc<Project>> {
        if let Some(p) = self.projects.lock().expect("projects lock").get(id) {
            return Ok(p.clone());
        }
        let store = self.store.clone();
        let owned = id.to_string();
        let loaded = blocking(move || {
            let state = store.load_state(&owned)?;
            let assets = store.load_assets(&owned)?;
            let net = store.load_net(&state)?;
            Ok(Project {
                assets: Arc::new(assets),
                state: RwLock::new(Arc::new(state)),
                net: RwLock::new(Arc::new(net)),
                write: tokio::sync::Mutex::new(()),
                job: Mutex::new(None),
            })
        })
        .await?;
        let mut map = self.projects.lock().expect("projects lock");
        Ok(map
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(loaded))
            .clone())
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.lock().expect("jobs lock").get_mut(id) {
            f(job);
        }
    }
}

/// Runs `f` on a copy of the state, persists the result and swaps it in.
async fn mutate<T: Send + 'static>(
    app: &AppState,
    p: &Project,
    f: impl FnOnce(&Assets, &AdapterNet, &mut ProjectState) -> AppResult<T> + Send + 'static,
) -> AppResult<T> {
    let _guard = p.write.lock().await;
    let mut state = (*p.snapshot()).clone();
    let assets = p.assets.clone();
    let net = p.net();
    let store = app.store.clone();
    let (state, out) = blocking(move || {
        let out = f(&assets, &net, &mut state)?;
        store.save_state(&state)?;
        Ok((state, out))
    })
    .await?;
    *p.state.write().expect("state lock") = Arc::new(state);
    Ok(out)
}

pub fn router(app: Shared) -> Router {
    Router::new()
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/initialize", post(initialize))
        .route("/projects/{id}/diagram", get(diagram))
        .route("/projects/{id}/frames/{n}/mesh", get(mesh))
        .route("/projects/{id}/adjust", post(adjust))
        .route("/projects/{id}/preference/apply", post(apply_preference))
        .route("/projects/{id}/preference/clear", post(clear_preference))
        .route("/projects/{id}/keyframes", post(add_keyframe))
        .route("/projects/{id}/finetune", post(start_finetune))
        .route("/projects/{id}/finetune-set", get(finetune_set))
        .route("/projects/{id}/export", get(export))
        .route("/jobs/{id}", get(get_job))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(app)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, store: Store) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!(
        "listening on http://{} (store {})",
        listener.local_addr()?,
        store.root().display()
    );
    axum::serve(listener, router(AppState::new(store)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Serialize)]
struct Created {
    id: String,
    status: Status,
    warnings: Vec<Diagnostic>,
}

async fn create_project(
    State(app): State<Shared>,
    body: Bytes,
) -> AppResult<(StatusCode, Json<Created>)> {
    let store = app.store.clone();
    let (state, valid) = blocking(move || {
        let upload: Upload = parse_body(&body)?;
        let valid = project::validate_upload(upload)?;
        let state = store.create(&valid)?;
        Ok((state, valid))
    })
    .await?;
    let net = valid.checkpoint.to_net()?;
    let created = Created {
        id: state.id.clone(),
        status: state.status,
        warnings: valid.warnings,
    };
    let p = Project {
        assets: Arc::new(valid.assets),
        state: RwLock::new(Arc::new(state)),
        net: RwLock::new(Arc::new(net)),
        write: tokio::sync::Mutex::new(()),
        job: Mutex::new(None),
    };
    app.projects
        .lock()
        .expect("projects lock")
        .insert(created.id.clone(), Arc::new(p));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_project(State(app): State<Shared>, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let p = app.project(&id).await?;
    let s = p.snapshot();
    let rig = &p.assets.rig;
    Ok(Json(json!({
        "id": s.id,
        "status": p.status(),
        "rig_name": rig.name,
        "channels": rig.channel_names(),
        "k": rig.k(),
        "vertex_count": rig.vertex_count,
        "landmark_frames": p.assets.landmarks.frames.len(),
        "fps": p.assets.fps(),
        "frame_count": s.track.as_ref().map(|t| t.len()),
        "keyframes": s.track.as_ref().map(|t| t.keyframes().clone()),
        "adjusted_frames": s.track.as_ref().map(|t| t.adjusted_frames().clone()),
        "checkpoint_file": s.checkpoint_file,
        "checkpoint_version": s.checkpoint_version,
        "ledger": s.ledger,
        "job": p.running_job(),
    })))
}

async fn initialize(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> AppResult<Json<project::InitSummary>> {
    let ramp = query
        .get("ramp_frames")
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| AppError::bad("ramp_frames", format!("{v:?} is not a frame count")))
        })
        .transpose()?;
    let p = app.project(&id).await?;
    if p.running_job().is_some() {
        return Err(AppError::Conflict(format!("project {id} is finetuning")));
    }
    let summary = mutate(&app, &p, move |assets, net, state| {
        project::initialize(assets, net, state, ramp)
    })
    .await?;
    Ok(Json(summary))
}

async fn diagram(State(app): State<Shared>, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let p = app.project(&id).await?;
    let points = project::diagram(&p.snapshot())?;
    Ok(Json(json!({ "points": points })))
}

async fn mesh(
    State(app): State<Shared>,
    Path((id, n)): Path<(String, String)>,
) -> AppResult<Json<project::MeshPayload>> {
    let p = app.project(&id).await?;
    let s = p.snapshot();
    let len = s.track()?.len();
    let frame = n
        .parse::<usize>()
        .ok()
        .filter(|&f| f < len)
        .ok_or_else(|| {
            AppError::NotFound(format!("frame {n} not found (track has {len} frames)"))
        })?;
    Ok(Json(project::mesh(&p.assets, &s, frame)?))
}

async fn adjust(
    State(app): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> AppResult<Json<Value>> {
    let req: AdjustRequest = parse_body(&body)?;
    let p = app.project(&id).await?;
    let ts = now_ms();
    let record = mutate(&app, &p, move |_, _, state| {
        project::adjust(state, &req, ts)
    })
    .await?;
    Ok(Json(json!({ "record": record })))
}

async fn apply_preference(
    State(app): State<Shared>,
    Path(id): Path<String>,
) -> AppResult<Json<Value>> {
    let p = app.project(&id).await?;
    let delta = mutate(&app, &p, |_, _, state| project::apply(state)).await?;
    Ok(Json(json!({ "preference": delta })))
}

async fn clear_preference(
    State(app): State<Shared>,
    Path(id): Path<String>,
) -> AppResult<Json<Value>> {
    let p = app.project(&id).await?;
    mutate(&app, &p, |_, _, state| {
        project::clear(state);
        Ok(())
    })
    .await?;
    Ok(Json(json!({ "cleared": true })))
}

#[derive(Deserialize)]
struct KeyframeRequest {
    frame: usize,
}

async fn add_keyframe(
    State(app): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> AppResult<Json<Value>> {
    let req: KeyframeRequest = parse_body(&body)?;
    let p = app.project(&id).await?;
    let added = mutate(&app, &p, move |_, _, state| {
        project::add_keyframe(state, req.frame)
    })
    .await?;
    Ok(Json(json!({ "frame": req.frame, "added": added })))
}

#[derive(Default, Deserialize)]
struct FinetuneRequest {
    /// Further projects whose adjusted frames join the finetune set.
    #[serde(default)]
    projects: Vec<String>,
}

async fn start_finetune(
    State(app): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> AppResult<(StatusCode, Json<Value>)> {
    let req: FinetuneRequest = if body.iter().all(u8::is_ascii_whitespace) {
        FinetuneRequest::default()
    } else {
        parse_body(&body)?
    };
    let p = app.project(&id).await?;
    let k = p.net().config.out_dim;
    let mut snapshots = vec![p.snapshot()];
    for other in req.projects.iter().filter(|o| **o != id) {
        let q = app
            .project(other)
            .await
            .map_err(|e| AppError::bad("projects", e.message()))?;
        if q.assets.rig.k() != k {
            return Err(AppError::bad(
                "projects",
                format!(
                    "project {other} has K={} but this checkpoint outputs K={k}",
                    q.assets.rig.k()
                ),
            ));
        }
        snapshots.push(q.snapshot());
    }
    let tracks = snapshots
        .iter()
        .filter_map(|s| s.track.as_ref())
        .collect::<Vec<_>>();
    let pairs = assemble_finetune_set(&tracks)?;
    if pairs.is_empty() {
        return Err(AppError::Conflict(
            "no adjusted frames to finetune on".into(),
        ));
    }
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    {
        let mut running = p.job.lock().expect("job lock");
        if let Some(existing) = running.as_ref() {
            return Err(AppError::Conflict(format!(
                "finetune job {existing} is already running"
            )));
        }
        *running = Some(job_id.clone());
    }
    let job = Job {
        id: job_id.clone(),
        project: id.clone(),
        status: JobStatus::Created,
        created_ms: now_ms(),
        finished_ms: None,
        report: None,
        checkpoint_version: None,
        error: None,
    };
    app.jobs
        .lock()
        .expect("jobs lock")
        .insert(job_id.clone(), job);
    let n = pairs.len();
    tokio::spawn(run_finetune(app.clone(), p, job_id.clone(), pairs));
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": job_id, "status": JobStatus::Created, "pairs": n })),
    ))
}

async fn run_finetune(app: Shared, p: Arc<Project>, job_id: String, pairs: Vec<SamplePair>) {
    app.update_job(&job_id, |j| j.status = JobStatus::Running);
    let result = finetune_and_swap(&app, &p, pairs).await;
    app.update_job(&job_id, |j| {
        j.finished_ms = Some(now_ms());
        match result {
            Ok((report, version)) => {
                j.status = JobStatus::Done;
                j.report = Some(report);
                j.checkpoint_version = Some(version);
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(e.report()["error"].clone());
            }
        }
    });
    *p.job.lock().expect("job lock") = None;
}

/// Trains a new checkpoint, writes it beside the old one and swaps it in.
async fn finetune_and_swap(
    app: &AppState,
    p: &Project,
    pairs: Vec<SamplePair>,
) -> AppResult<(FinetuneReport, u32)> {
    let net = p.net();
    let (tuned, report) = blocking(move || {
        Ok(finetune(
            &net,
            &pairs,
            &TrainConfig::default(),
            &FinetuneConfig::default(),
        )?)
    })
    .await?;
    let _guard = p.write.lock().await;
    let mut state = (*p.snapshot()).clone();
    let store = app.store.clone();
    let checkpoint = Checkpoint::new(&tuned, None, None);
    let state = blocking(move || {
        let version = state.checkpoint_version + 1;
        state.checkpoint_file = store.save_checkpoint(&state.id, version, &checkpoint)?;
        state.checkpoint_version = version;
        store.save_state(&state)?;
        Ok(state)
    })
    .await?;
    let version = state.checkpoint_version;
    *p.net.write().expect("net lock") = Arc::new(tuned);
    *p.state.write().expect("state lock") = Arc::new(state);
    Ok((report, version))
}

/// The project's adjusted frames as a dataset file with only a train split.
async fn finetune_set(
    State(app): State<Shared>,
    Path(id): Path<String>,
) -> AppResult<Json<GeneratedDataset>> {
    let p = app.project(&id).await?;
    let s = p.snapshot();
    let train = assemble_finetune_set(&[s.track()?])?;
    Ok(Json(GeneratedDataset {
        rig_name: p.assets.rig.name.clone(),
        seed: 0,
        rules: RuleSet::default(),
        train,
        val: Vec::new(),
        test: Vec::new(),
        resampled: 0,
    }))
}

async fn get_job(State(app): State<Shared>, Path(id): Path<String>) -> AppResult<Json<Job>> {
    app.jobs
        .lock()
        .expect("jobs lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| AppError::NotFound(format!("no job {id:?}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

async fn export(State(app): State<Shared>, Path(id): Path<String>) -> AppResult<Response> {
    let p = app.project(&id).await?;
    let bytes = project::export(&p.assets, &p.snapshot())?.to_bytes()?;
    let digest = sha256_hex(&bytes);
    let header =
        |v: String| HeaderValue::from_str(&v).map_err(|e| AppError::Internal(e.to_string()));
    let disposition = format!(
        "attachment; filename=\"{}-animation.json\"",
        p.assets.rig.name.replace(
            |c: char| !c.is_ascii_alphanumeric() && c != '-' && c != '_',
            "_"
        )
    );
    Ok((
        [
            (
                header::CONTENT_TYPE,
                HeaderValue::from_static("application/json"),
            ),
            (header::ETAG, header(format!("\"{digest}\""))?),
            (header::CONTENT_DISPOSITION, header(disposition)?),
            (
                header::HeaderName::from_static("x-content-sha256"),
                header(digest)?,
            ),
        ],
        bytes,
    )
        .into_response())
}
