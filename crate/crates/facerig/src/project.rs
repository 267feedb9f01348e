//! Projects: uploaded assets plus the editable track and preference ledger,
//! persisted as a directory of plain files. Shared by the CLI and the server.

use std::path::{Path, PathBuf};
use std::time::Instant;

use facerig_core::adapter::{AdapterNet, Checkpoint};
use facerig_core::animation::{
    estimate_track, export_track, AnimationExport, FrameTrack, PoseExport, DEFAULT_FPS,
};
use facerig_core::fitter::{FitConfig, LandmarkSequence};
use facerig_core::hitl::{
    apply_preference, clear_preference, record_adjustment, PreferenceDelta, PreferenceLedger,
    PreferenceRecord,
};
use facerig_core::io::{read_json, write_json_atomic};
use facerig_core::model::{IdentityParams, ModelFile, MorphableModel};
use facerig_core::rig::{validate_rig, CharacterRig, Diagnostic, Severity};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const STORE_ENV: &str = "FACERIG_STORE";
const DEFAULT_STORE: &str = "facerig-store";
const STATE_FILE: &str = "project.json";

#[derive(Debug)]
pub enum AppError {
    /// One offending request field.
    BadRequest {
        field: String,
        message: String,
    },
    /// Upload rejected with field-level diagnostics.
    Invalid(Vec<Diagnostic>),
    NotFound(String),
    Conflict(String),
    Core(facerig_core::Error),
    Internal(String),
}

impl AppError {
    pub fn bad(field: impl Into<String>, message: impl Into<String>) -> Self {
        AppError::BadRequest {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::BadRequest { .. } => "bad_request",
            AppError::Invalid(_) => "invalid_project",
            AppError::NotFound(_) => "not_found",
            AppError::Conflict(_) => "conflict",
            AppError::Core(e) => e.kind(),
            AppError::Internal(_) => "internal",
        }
    }

    pub fn message(&self) -> String {
        match self {
            AppError::BadRequest { field, message } => format!("{field}: {message}"),
            AppError::Invalid(d) => {
                let errors: Vec<String> = d
                    .iter()
                    .filter(|d| d.severity == Severity::Error)
                    .map(|d| format!("{}: {}", d.field, d.message))
                    .collect();
                format!("project rejected: {}", errors.join("; "))
            }
            AppError::NotFound(m) | AppError::Conflict(m) | AppError::Internal(m) => m.clone(),
            AppError::Core(e) => e.to_string(),
        }
    }

    /// Machine-readable error body.
    pub fn report(&self) -> Value {
        let mut body = serde_json::json!({ "kind": self.kind(), "message": self.message() });
        match self {
            AppError::BadRequest { field, .. } => body["field"] = field.clone().into(),
            AppError::Invalid(d) => {
                body["diagnostics"] = serde_json::to_value(d).unwrap_or_default()
            }
            AppError::Core(facerig_core::Error::Frame { frame, .. }) => {
                body["frame"] = (*frame).into()
            }
            _ => {}
        }
        serde_json::json!({ "error": body })
    }
}

impl From<facerig_core::Error> for AppError {
    fn from(e: facerig_core::Error) -> Self {
        AppError::Core(e)
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message())
    }
}

impl std::error::Error for AppError {}

pub type AppResult<T> = Result<T, AppError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Created,
    Initialized,
    Finetuning,
}

/// Immutable inputs of a project.
pub struct Assets {
    pub rig: CharacterRig,
    pub model: MorphableModel,
    pub landmarks: LandmarkSequence,
}

impl Assets {
    pub fn fps(&self) -> f64 {
        self.landmarks.fps.unwrap_or(DEFAULT_FPS)
    }
}

/// Mutable part of a project, persisted atomically as one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub id: String,
    /// `created` or `initialized`; `finetuning` only exists while a job runs.
    pub status: Status,
    pub checkpoint_file: String,
    pub checkpoint_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track: Option<FrameTrack>,
    #[serde(default)]
    pub ledger: PreferenceLedger,
}

impl ProjectState {
    pub fn track(&self) -> AppResult<&FrameTrack> {
        self.track
            .as_ref()
            .ok_or_else(|| AppError::Conflict(format!("project {} is not initialized", self.id)))
    }

    fn track_mut(&mut self) -> AppResult<&mut FrameTrack> {
        let id = self.id.clone();
        self.track
            .as_mut()
            .ok_or_else(|| AppError::Conflict(format!("project {id} is not initialized")))
    }
}

/// Upload body of `POST /projects`: the four files, inline.
#[derive(Debug, Deserialize)]
pub struct Upload {
    pub rig: Value,
    pub model: Value,
    pub checkpoint: Value,
    pub landmarks: Value,
}

pub struct ValidUpload {
    pub assets: Assets,
    pub checkpoint: Checkpoint,
    pub warnings: Vec<Diagnostic>,
}

fn diag(field: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        severity: Severity::Error,
        field: field.into(),
        message: message.into(),
    }
}

fn parse_part<T: serde::de::DeserializeOwned>(
    value: Value,
    field: &str,
    out: &mut Vec<Diagnostic>,
) -> Option<T> {
    serde_json::from_value(value)
        .map_err(|e| out.push(diag(field, e.to_string())))
        .ok()
}

/// Parses and cross-validates an upload, collecting every problem found.
pub fn validate_upload(upload: Upload) -> AppResult<ValidUpload> {
    let mut diags = Vec::new();
    let rig: Option<CharacterRig> = parse_part(upload.rig, "rig", &mut diags);
    if let Some(rig) = &rig {
        diags.extend(validate_rig(rig).into_iter().map(|mut d| {
            d.field = format!("rig.{}", d.field);
            d
        }));
    }
    let model = parse_part::<ModelFile>(upload.model, "model", &mut diags).and_then(|f| {
        MorphableModel::try_from(f)
            .map_err(|e| diags.push(diag("model", e.to_string())))
            .ok()
    });
    let checkpoint = parse_part::<Checkpoint>(upload.checkpoint, "checkpoint", &mut diags)
        .and_then(|c| {
            c.to_net()
                .map(|_| c.clone())
                .map_err(|e| diags.push(diag("checkpoint", e.to_string())))
                .ok()
        });
    let landmarks = parse_part::<LandmarkSequence>(upload.landmarks, "landmarks", &mut diags)
        .and_then(|s| {
            s.validate()
                .map(|_| s.clone())
                .map_err(|e| diags.push(diag("landmarks", e.to_string())))
                .ok()
        });
    if let (Some(rig), Some(ck)) = (&rig, &checkpoint) {
        if ck.config.out_dim != rig.k() {
            diags.push(diag(
                "checkpoint.config.out_dim",
                format!(
                    "checkpoint outputs K={} channels but rig {:?} has K={} blendshapes",
                    ck.config.out_dim,
                    rig.name,
                    rig.k()
                ),
            ));
        }
    }
    if diags.iter().any(|d| d.severity == Severity::Error) {
        return Err(AppError::Invalid(diags));
    }
    match (rig, model, checkpoint, landmarks) {
        (Some(rig), Some(model), Some(checkpoint), Some(landmarks)) => Ok(ValidUpload {
            assets: Assets {
                rig,
                model,
                landmarks,
            },
            checkpoint,
            warnings: diags,
        }),
        _ => Err(AppError::Invalid(diags)),
    }
}

/// Directory-per-project store. Each project directory holds `rig.json`,
/// `model.json`, `landmarks.json`, `checkpoint-<n>.json` files and
/// `project.json`, which is written last and replaced atomically.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$FACERIG_STORE`, or `./facerig-store`.
    pub fn from_env() -> Self {
        Self::new(
            std::env::var_os(STORE_ENV).map_or_else(|| PathBuf::from(DEFAULT_STORE), PathBuf::from),
        )
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> AppResult<PathBuf> {
        // ids are generated uuids; anything else never names a project
        uuid::Uuid::parse_str(id).map_err(|_| AppError::NotFound(format!("no project {id:?}")))?;
        Ok(self.root.join(id))
    }

    pub fn create(&self, upload: &ValidUpload) -> AppResult<ProjectState> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&id);
        std::fs::create_dir_all(&dir)
            .map_err(|e| AppError::Internal(format!("{}: {e}", dir.display())))?;
        let a = &upload.assets;
        a.rig.save(dir.join("rig.json"))?;
        a.model.save(dir.join("model.json"))?;
        a.landmarks.save(dir.join("landmarks.json"))?;
        let checkpoint_file = "checkpoint-0.json".to_string();
        upload.checkpoint.save(dir.join(&checkpoint_file))?;
        let state = ProjectState {
            id,
            status: Status::Created,
            checkpoint_file,
            checkpoint_version: 0,
            track: None,
            ledger: PreferenceLedger::default(),
        };
        self.save_state(&state)?;
        Ok(state)
    }

    pub fn load_state(&self, id: &str) -> AppResult<ProjectState> {
        let path = self.dir(id)?.join(STATE_FILE);
        if !path.exists() {
            return Err(AppError::NotFound(format!("no project {id:?}")));
        }
        let mut state: ProjectState = read_json(path)?;
        if state.status == Status::Finetuning {
            state.status = Status::Initialized;
        }
        Ok(state)
    }

    pub fn load_assets(&self, id: &str) -> AppResult<Assets> {
        let dir = self.dir(id)?;
        Ok(Assets {
            rig: CharacterRig::load(dir.join("rig.json"))?,
            model: MorphableModel::load(dir.join("model.json"))?,
            landmarks: LandmarkSequence::load(dir.join("landmarks.json"))?,
        })
    }

    pub fn load_net(&self, state: &ProjectState) -> AppResult<AdapterNet> {
        let path = self.dir(&state.id)?.join(&state.checkpoint_file);
        Ok(Checkpoint::load(path)?.to_net()?)
    }

    pub fn save_state(&self, state: &ProjectState) -> AppResult<()> {
        let path = self.dir(&state.id)?.join(STATE_FILE);
        Ok(write_json_atomic(path, state)?)
    }

    /// Writes checkpoint `version` next to the older ones, which stay on disk.
    pub fn save_checkpoint(
        &self,
        id: &str,
        version: u32,
        checkpoint: &Checkpoint,
    ) -> AppResult<String> {
        let file = format!("checkpoint-{version}.json");
        checkpoint.save(self.dir(id)?.join(&file))?;
        Ok(file)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_frame_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitSummary {
    pub frame_count: usize,
    pub keyframes: Vec<usize>,
    pub timing: Timing,
    /// A one-frame input can be expanded with `?ramp_frames=N`.
    pub ramp_available: bool,
    pub checkpoint_version: u32,
}

/// Rebuilds the track from the landmarks with the current checkpoint. The
/// ledger is kept.
pub fn initialize(
    assets: &Assets,
    net: &AdapterNet,
    state: &mut ProjectState,
    ramp_frames: Option<usize>,
) -> AppResult<InitSummary> {
    let frames = assets.landmarks.model_frames();
    if let Some(n) = ramp_frames {
        if frames.len() != 1 {
            return Err(AppError::bad(
                "ramp_frames",
                format!(
                    "ramp expansion needs a single-image input, got {} frames",
                    frames.len()
                ),
            ));
        }
        if n < 3 {
            return Err(AppError::bad(
                "ramp_frames",
                format!("a ramp needs at least 3 frames, got {n}"),
            ));
        }
    }
    let started = Instant::now();
    let beta = IdentityParams::zeros(assets.model.id_dim());
    let mut track = estimate_track(&frames, &assets.model, &beta, net, &FitConfig::default())?;
    let total = started.elapsed().as_secs_f64();
    let per_frame = total / frames.len() as f64;
    let ramp_available = track.len() == 1;
    if let Some(n) = ramp_frames {
        track = track.expand_ramp(n)?;
    }
    let summary = InitSummary {
        frame_count: track.len(),
        keyframes: track.keyframes().iter().copied().collect(),
        timing: Timing {
            total_seconds: total,
            per_frame_seconds: per_frame,
        },
        ramp_available: ramp_available && ramp_frames.is_none(),
        checkpoint_version: state.checkpoint_version,
    };
    state.track = Some(track);
    state.status = Status::Initialized;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Plain,
    Keyframe,
    Adjusted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramPoint {
    pub frame_index: usize,
    pub mean_alpha: f64,
    pub kind: PointKind,
}

pub fn diagram(state: &ProjectState) -> AppResult<Vec<DiagramPoint>> {
    let track = state.track()?;
    Ok(track
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| DiagramPoint {
            frame_index: i,
            mean_alpha: f.alpha_current.mean(),
            kind: if track.adjusted_frames().contains(&i) {
                PointKind::Adjusted
            } else if track.keyframes().contains(&i) {
                PointKind::Keyframe
            } else {
                PointKind::Plain
            },
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshPayload {
    pub frame_index: usize,
    /// Flat x,y,z per vertex.
    pub vertices: Vec<f64>,
    pub faces: Vec<[u32; 3]>,
    pub channels: Vec<String>,
    pub alpha: Vec<f64>,
    pub pose: Option<PoseExport>,
    /// Reference 2D landmarks for the frame, in the input file's convention.
    pub reference_landmarks: Option<Vec<[f64; 2]>>,
}

fn check_frame(track: &FrameTrack, frame: usize) -> AppResult<()> {
    if frame < track.len() {
        Ok(())
    } else {
        Err(AppError::bad(
            "frame",
            format!(
                "frame {frame} out of range (track has {} frames)",
                track.len()
            ),
        ))
    }
}

pub fn mesh(assets: &Assets, state: &ProjectState, frame: usize) -> AppResult<MeshPayload> {
    let track = state.track()?;
    check_frame(track, frame)?;
    let f = track.frame(frame)?;
    let vertices = assets.rig.apply_blendweights(&f.alpha_current)?;
    let seq = &assets.landmarks.frames;
    // ramp frames all refer back to the single source image
    let reference = if seq.len() == 1 {
        seq.first()
    } else {
        seq.get(frame)
    };
    Ok(MeshPayload {
        frame_index: frame,
        vertices: vertices.0,
        faces: assets.rig.faces.clone(),
        channels: assets.rig.channel_names(),
        alpha: f.alpha_current.as_slice().to_vec(),
        pose: f.pose.as_ref().map(PoseExport::from),
        reference_landmarks: reference.map(|l| l.points().iter().map(|p| [p.x, p.y]).collect()),
    })
}

#[derive(Clone, Debug, Deserialize)]
pub struct AdjustRequest {
    pub frame: usize,
    /// Channel index.
    pub target: usize,
    pub value: f64,
}

pub fn adjust(
    state: &mut ProjectState,
    req: &AdjustRequest,
    timestamp_ms: u64,
) -> AppResult<PreferenceRecord> {
    let track = state.track()?;
    check_frame(track, req.frame)?;
    if req.target >= track.k() {
        return Err(AppError::bad(
            "target",
            format!(
                "target {} out of range (rig has {} blendshapes)",
                req.target,
                track.k()
            ),
        ));
    }
    if !(0.0..=1.0).contains(&req.value) {
        return Err(AppError::bad(
            "value",
            format!("value {} is outside the valid range [0, 1]", req.value),
        ));
    }
    let ProjectState { track, ledger, .. } = state;
    let track = track.as_mut().expect("checked above");
    Ok(record_adjustment(
        ledger,
        track,
        req.frame,
        req.target,
        req.value,
        timestamp_ms,
    )?)
}

pub fn apply(state: &mut ProjectState) -> AppResult<PreferenceDelta> {
    state.track()?;
    let ProjectState { track, ledger, .. } = state;
    Ok(apply_preference(
        ledger,
        track.as_mut().expect("checked above"),
    )?)
}

pub fn clear(state: &mut ProjectState) {
    clear_preference(&mut state.ledger);
}

pub fn add_keyframe(state: &mut ProjectState, frame: usize) -> AppResult<bool> {
    let offset = state.ledger.offset().map(<[f64]>::to_vec);
    let track = state.track_mut()?;
    check_frame(track, frame)?;
    Ok(track.add_keyframe(frame, offset.as_deref())?)
}

pub fn export(assets: &Assets, state: &ProjectState) -> AppResult<AnimationExport> {
    Ok(export_track(
        state.track()?,
        &assets.rig,
        assets.fps(),
        &state.ledger,
    )?)
}
