//! Project registry and per-project data stores.
//!
//! On-disk layout under the data root:
//!
//! ```text
//! projects/<id>/project.json          canonical manifest
//! projects/<id>/meta.json             registry metadata
//! projects/<id>/events.ndjson         ingest / review / rescore events
//! projects/<id>/media/<digest>.png    received media
//! projects/<id>/model/                published bundles + current.json
//! projects/<id>/uploads/<sid>.{json,part}
//! projects/<id>/snapshots/snapshot-<n>.json
//! ```
//!
//! Mutations of one project go through that project's writer lock; readers
//! clone an `Arc` of the current immutable view and never wait on a writer.
//! Lock order is always project writer, then upload session.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use fieldforge_core::bundle::{open_bundle, BundleError, LoadedModel};
use fieldforge_core::detect::Detection;
use fieldforge_core::digest::{is_sha256_hex, sha256_hex};
use fieldforge_core::manifest::{self, ProjectManifest, MANIFEST_FILE};
use fieldforge_core::protocol::*;
use fieldforge_core::raster::decode_png;
use fieldforge_core::refdet::{self, RefDetModel};
use parking_lot::{Mutex, RwLock};
use semver::Version;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{ApiError, ApiResult};
use crate::pagination::{decode_cursor, encode_cursor, SortKey, DEFAULT_LIMIT, MAX_LIMIT};
use crate::snapshot::build_snapshot;
use crate::storage::{append_line, read_json, replay_lines, write_atomic, write_canonical};

const PROJECTS_DIR: &str = "projects";
const EVENTS_FILE: &str = "events.ndjson";
const META_FILE: &str = "meta.json";
const MEDIA_DIR: &str = "media";
const MODEL_DIR: &str = "model";
const UPLOADS_DIR: &str = "uploads";
const SNAPSHOTS_DIR: &str = "snapshots";
const CURRENT_MODEL: &str = "current.json";

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Per-project cap on stored plus in-flight media bytes.
    pub quota_bytes: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObservationFilter {
    pub reviewed: Option<bool>,
    pub verdict: Option<Verdict>,
}

impl ObservationFilter {
    fn matches(&self, obs: &StoredObservation) -> bool {
        let verdict = obs.review.as_ref().map(|r| r.verdict);
        self.reviewed.is_none_or(|r| r == verdict.is_some())
            && self.verdict.is_none_or(|v| verdict == Some(v))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Event {
    Ingested {
        observation: StoredObservation,
    },
    Reviewed {
        observation_id: Uuid,
        decision: ReviewDecision,
    },
    Rescored {
        observation_id: Uuid,
        detections: Vec<Detection>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProjectMeta {
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Published {
    info: ModelInfo,
    file: String,
}

#[derive(Debug, Clone)]
struct ProjectView {
    manifest: ProjectManifest,
    created_at: DateTime<Utc>,
    published: Option<Published>,
    observations: HashMap<Uuid, Arc<StoredObservation>>,
    order: BTreeSet<SortKey>,
    by_digest: HashMap<String, Uuid>,
    last_snapshot: u64,
    media_bytes: u64,
}

impl ProjectView {
    fn apply(&mut self, event: Event) {
        match event {
            Event::Ingested { observation } => {
                let id = observation.observation_id;
                self.order.insert(SortKey {
                    received_at: observation.received_at,
                    observation_id: id,
                });
                self.by_digest
                    .insert(observation.content_digest.clone(), id);
                self.observations.insert(id, Arc::new(observation));
            }
            Event::Reviewed {
                observation_id,
                decision,
            } => {
                if let Some(obs) = self.observations.get_mut(&observation_id) {
                    let obs = Arc::make_mut(obs);
                    obs.review_history.push(decision);
                    obs.review = obs.review_history.last().cloned();
                }
            }
            Event::Rescored {
                observation_id,
                detections,
            } => {
                if let Some(obs) = self.observations.get_mut(&observation_id) {
                    Arc::make_mut(obs).server_detections = Some(detections);
                }
            }
        }
    }

    fn info(&self) -> ProjectInfo {
        ProjectInfo {
            manifest: self.manifest.clone(),
            published: self.published.as_ref().map(|p| p.info.clone()),
            created_at: self.created_at,
            observation_count: self.observations.len() as u64,
        }
    }

    fn ordered(&self) -> impl Iterator<Item = &StoredObservation> {
        self.order
            .iter()
            .map(|k| self.observations[&k.observation_id].as_ref())
    }
}

#[derive(Default)]
struct WriterState {
    /// observation id -> open session id
    open_sessions: HashMap<Uuid, Uuid>,
}

struct Project {
    dir: PathBuf,
    writer: Mutex<WriterState>,
    view: RwLock<Arc<ProjectView>>,
}

impl Project {
    fn view(&self) -> Arc<ProjectView> {
        self.view.read().clone()
    }

    /// Persists `event`, then publishes a new view containing it.
    fn commit(&self, _writer: &mut WriterState, event: Event) -> ApiResult<Arc<ProjectView>> {
        append_line(&self.dir.join(EVENTS_FILE), &event)?;
        let mut next = (*self.view()).clone();
        next.apply(event);
        let next = Arc::new(next);
        *self.view.write() = next.clone();
        Ok(next)
    }

    fn replace_view(&self, f: impl FnOnce(&mut ProjectView)) -> Arc<ProjectView> {
        let mut next = (*self.view()).clone();
        f(&mut next);
        let next = Arc::new(next);
        *self.view.write() = next.clone();
        next
    }
}

struct SessionEntry {
    meta: UploadSession,
    dir: PathBuf,
}

impl SessionEntry {
    fn part_path(&self) -> PathBuf {
        self.dir.join(format!("{}.part", self.meta.session_id))
    }

    fn meta_path(&self) -> PathBuf {
        self.dir.join(format!("{}.json", self.meta.session_id))
    }

    fn persist(&self) -> ApiResult<()> {
        Ok(write_canonical(&self.meta_path(), &self.meta)?)
    }

    fn close(&mut self, state: SessionState) -> ApiResult<()> {
        self.meta.state = state;
        self.persist()?;
        match fs::remove_file(self.part_path()) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

/// The primary server state: every project plus the upload sessions.
pub struct Registry {
    root: PathBuf,
    config: ServerConfig,
    projects: RwLock<HashMap<String, Arc<Project>>>,
    create_lock: Mutex<()>,
    observation_index: RwLock<HashMap<Uuid, String>>,
    sessions: RwLock<HashMap<Uuid, Arc<Mutex<SessionEntry>>>>,
}

fn unknown_project(id: &str) -> ApiError {
    ApiError::new(ErrorCode::UnknownProject, format!("no project {id:?}"))
}

fn unknown_observation(id: Uuid) -> ApiError {
    ApiError::new(
        ErrorCode::UnknownObservation,
        format!("no observation {id}"),
    )
}

fn bundle_error(e: BundleError) -> ApiError {
    match e {
        BundleError::UnknownEngine(_) => ApiError::new(ErrorCode::UnknownEngine, e.to_string()),
        BundleError::DigestMismatch { .. } => {
            ApiError::new(ErrorCode::DigestMismatch, e.to_string())
        }
        _ => ApiError::new(ErrorCode::MalformedArchive, e.to_string()),
    }
}

impl Registry {
    /// Opens (or initializes) the data root and reloads every project.
    pub fn open(root: impl Into<PathBuf>, config: ServerConfig) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(PROJECTS_DIR))?;
        let registry = Registry {
            root,
            config,
            projects: RwLock::new(HashMap::new()),
            create_lock: Mutex::new(()),
            observation_index: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
        };
        for entry in fs::read_dir(registry.root.join(PROJECTS_DIR))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || !entry.path().join(MANIFEST_FILE).exists() {
                continue;
            }
            registry.load_project(&entry.path())?;
        }
        Ok(registry)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn load_project(&self, dir: &Path) -> std::io::Result<()> {
        let manifest: ProjectManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let meta: ProjectMeta = read_json(&dir.join(META_FILE))?;
        let current = dir.join(MODEL_DIR).join(CURRENT_MODEL);
        let published: Option<Published> = if current.exists() {
            Some(read_json(&current)?)
        } else {
            None
        };
        let mut view = ProjectView {
            manifest,
            created_at: meta.created_at,
            published,
            observations: HashMap::new(),
            order: BTreeSet::new(),
            by_digest: HashMap::new(),
            last_snapshot: 0,
            media_bytes: 0,
        };
        for event in replay_lines::<Event>(&dir.join(EVENTS_FILE))? {
            view.apply(event);
        }
        for entry in fs::read_dir(dir.join(MEDIA_DIR))? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().ends_with(".png") {
                view.media_bytes += entry.metadata()?.len();
            }
        }
        for entry in fs::read_dir(dir.join(SNAPSHOTS_DIR))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(n) = name
                .strip_prefix("snapshot-")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                view.last_snapshot = view.last_snapshot.max(n);
            }
        }

        let mut writer = WriterState::default();
        let uploads = dir.join(UPLOADS_DIR);
        for entry in fs::read_dir(&uploads)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let mut meta: UploadSession = read_json(&path)?;
            if meta.state == SessionState::Open {
                // the part file holds exactly the synced bytes
                let part = uploads.join(format!("{}.part", meta.session_id));
                let len = fs::metadata(&part).map(|m| m.len()).unwrap_or(0);
                meta.committed_offset = len.min(meta.total_size);
                writer
                    .open_sessions
                    .insert(meta.observation_id, meta.session_id);
            }
            self.sessions.write().insert(
                meta.session_id,
                Arc::new(Mutex::new(SessionEntry {
                    meta,
                    dir: uploads.clone(),
                })),
            );
        }

        let mut index = self.observation_index.write();
        for id in view.observations.keys() {
            index.insert(*id, view.manifest.project_id.clone());
        }
        drop(index);
        self.projects.write().insert(
            view.manifest.project_id.clone(),
            Arc::new(Project {
                dir: dir.to_path_buf(),
                writer: Mutex::new(writer),
                view: RwLock::new(Arc::new(view)),
            }),
        );
        Ok(())
    }

    fn project(&self, id: &str) -> ApiResult<Arc<Project>> {
        self.projects
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| unknown_project(id))
    }

    fn project_of(&self, oid: Uuid) -> ApiResult<Arc<Project>> {
        let pid = self
            .observation_index
            .read()
            .get(&oid)
            .cloned()
            .ok_or_else(|| unknown_observation(oid))?;
        self.project(&pid)
    }

    fn session(&self, sid: Uuid) -> ApiResult<Arc<Mutex<SessionEntry>>> {
        self.sessions.read().get(&sid).cloned().ok_or_else(|| {
            ApiError::new(
                ErrorCode::UnknownSession,
                format!("no upload session {sid}"),
            )
        })
    }

    pub fn project_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.projects.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    // ---- registry -------------------------------------------------------

    pub fn create_project(&self, manifest: ProjectManifest) -> ApiResult<ProjectInfo> {
        let report = manifest::validate_manifest(&manifest);
        if !report.is_valid() {
            return Err(ApiError::new(
                ErrorCode::InvalidManifest,
                report.to_string(),
            ));
        }
        let _guard = self.create_lock.lock();
        let id = manifest.project_id.clone();
        if self.projects.read().contains_key(&id) {
            return Err(ApiError::new(
                ErrorCode::DuplicateProject,
                format!("project {id:?} exists"),
            ));
        }
        let base = self.root.join(PROJECTS_DIR);
        let staging = base.join(format!(".{id}.{}", Uuid::new_v4().simple()));
        for sub in [MEDIA_DIR, MODEL_DIR, UPLOADS_DIR, SNAPSHOTS_DIR] {
            fs::create_dir_all(staging.join(sub))?;
        }
        let created_at = Utc::now();
        write_canonical(&staging.join(MANIFEST_FILE), &manifest)?;
        write_canonical(&staging.join(META_FILE), &ProjectMeta { created_at })?;
        let dir = base.join(&id);
        fs::rename(&staging, &dir)?;

        let view = ProjectView {
            manifest,
            created_at,
            published: None,
            observations: HashMap::new(),
            order: BTreeSet::new(),
            by_digest: HashMap::new(),
            last_snapshot: 0,
            media_bytes: 0,
        };
        let info = view.info();
        self.projects.write().insert(
            id,
            Arc::new(Project {
                dir,
                writer: Mutex::new(WriterState::default()),
                view: RwLock::new(Arc::new(view)),
            }),
        );
        Ok(info)
    }

    pub fn project_info(&self, id: &str) -> ApiResult<ProjectInfo> {
        Ok(self.project(id)?.view().info())
    }

    pub fn manifest(&self, id: &str) -> ApiResult<ProjectManifest> {
        Ok(self.project(id)?.view().manifest.clone())
    }

    // ---- models ---------------------------------------------------------

    /// Publishes a bundle if it verifies, fits the project's labels and is
    /// strictly newer than the current one.
    pub fn publish_model(&self, id: &str, bundle: &[u8]) -> ApiResult<ModelInfo> {
        let project = self.project(id)?;
        let model = LoadedModel::from_bundle(bundle, None).map_err(bundle_error)?;
        let _w = project.writer.lock();
        let view = project.view();
        if model.labels.len() != view.manifest.labels.len() {
            return Err(ApiError::new(
                ErrorCode::LabelMismatch,
                format!(
                    "bundle has {} labels, project has {}",
                    model.labels.len(),
                    view.manifest.labels.len()
                ),
            ));
        }
        if let Some(current) = &view.published {
            if model.meta.version <= current.info.meta.version {
                return Err(ApiError::new(
                    ErrorCode::StaleVersion,
                    format!(
                        "published version is {}, refusing {}",
                        current.info.meta.version, model.meta.version
                    ),
                ));
            }
        }
        let file = format!("model-{}.bundle", model.meta.version);
        let model_dir = project.dir.join(MODEL_DIR);
        write_atomic(&model_dir.join(&file), bundle)?;
        let published = Published {
            info: ModelInfo {
                meta: model.meta.clone(),
                digest: model.digest.clone(),
            },
            file,
        };
        write_canonical(&model_dir.join(CURRENT_MODEL), &published)?;
        let info = published.info.clone();
        project.replace_view(|v| v.published = Some(published));
        Ok(info)
    }

    pub fn published_model(&self, id: &str) -> ApiResult<Option<ModelInfo>> {
        Ok(self
            .project(id)?
            .view()
            .published
            .as_ref()
            .map(|p| p.info.clone()))
    }

    /// The published bundle's info when it is strictly newer than `current`.
    pub fn check_model_update(
        &self,
        id: &str,
        current: Option<&Version>,
    ) -> ApiResult<ModelUpdate> {
        Ok(match self.published_model(id)? {
            Some(info) if current.is_none_or(|c| info.meta.version > *c) => {
                ModelUpdate::NewBundle(info)
            }
            _ => ModelUpdate::NoChange,
        })
    }

    pub fn model_bytes(&self, id: &str) -> ApiResult<Vec<u8>> {
        let project = self.project(id)?;
        let view = project.view();
        let published = view
            .published
            .as_ref()
            .ok_or_else(|| ApiError::new(ErrorCode::NotFound, "no model published"))?;
        let bytes = fs::read(project.dir.join(MODEL_DIR).join(&published.file))?;
        if sha256_hex(&bytes) != published.info.digest {
            return Err(ApiError::internal(
                "published bundle failed digest verification",
            ));
        }
        Ok(bytes)
    }

    // ---- uploads --------------------------------------------------------

    pub fn begin_upload(&self, id: &str, req: &BeginUploadRequest) -> ApiResult<UploadSession> {
        if !is_sha256_hex(&req.content_digest) {
            return Err(ApiError::new(
                ErrorCode::BadRequest,
                "content_digest must be lowercase SHA-256 hex",
            ));
        }
        let project = self.project(id)?;
        let mut w = project.writer.lock();
        let view = project.view();
        let dir = project.dir.join(UPLOADS_DIR);

        if view.by_digest.contains_key(&req.content_digest) {
            let entry = SessionEntry {
                meta: UploadSession {
                    session_id: Uuid::new_v4(),
                    observation_id: req.observation_id,
                    project_id: id.to_string(),
                    total_size: req.total_size,
                    committed_offset: req.total_size,
                    content_digest: req.content_digest.clone(),
                    state: SessionState::Complete,
                },
                dir,
            };
            entry.persist()?;
            let meta = entry.meta.clone();
            self.sessions
                .write()
                .insert(meta.session_id, Arc::new(Mutex::new(entry)));
            return Ok(meta);
        }

        if let Some(sid) = w.open_sessions.get(&req.observation_id).copied() {
            let entry = self.session(sid)?;
            let mut s = entry.lock();
            if s.meta.state == SessionState::Open {
                if s.meta.content_digest == req.content_digest
                    && s.meta.total_size == req.total_size
                {
                    return Ok(s.meta.clone());
                }
                s.close(SessionState::Aborted)?;
            }
            w.open_sessions.remove(&req.observation_id);
        }

        if let Some(quota) = self.config.quota_bytes {
            let in_flight: u64 = w
                .open_sessions
                .values()
                .filter_map(|sid| self.sessions.read().get(sid).cloned())
                .map(|e| e.lock().meta.total_size)
                .sum();
            if view.media_bytes + in_flight + req.total_size > quota {
                return Err(ApiError::new(
                    ErrorCode::QuotaExceeded,
                    format!("project quota of {quota} bytes would be exceeded"),
                ));
            }
        }

        let entry = SessionEntry {
            meta: UploadSession {
                session_id: Uuid::new_v4(),
                observation_id: req.observation_id,
                project_id: id.to_string(),
                total_size: req.total_size,
                committed_offset: 0,
                content_digest: req.content_digest.clone(),
                state: SessionState::Open,
            },
            dir,
        };
        fs::File::create(entry.part_path())?.sync_all()?;
        entry.persist()?;
        let meta = entry.meta.clone();
        self.sessions
            .write()
            .insert(meta.session_id, Arc::new(Mutex::new(entry)));
        w.open_sessions.insert(req.observation_id, meta.session_id);
        Ok(meta)
    }

    pub fn upload_status(&self, sid: Uuid) -> ApiResult<UploadSession> {
        Ok(self.session(sid)?.lock().meta.clone())
    }

    /// The open upload session for an observation, if any.
    pub fn open_session_for(
        &self,
        project_id: &str,
        oid: Uuid,
    ) -> ApiResult<Option<UploadSession>> {
        let project = self.project(project_id)?;
        let sid = project.writer.lock().open_sessions.get(&oid).copied();
        match sid {
            Some(sid) => Ok(Some(self.upload_status(sid)?)),
            None => Ok(None),
        }
    }

    /// Appends a chunk at exactly the committed offset; the bytes are synced
    /// to disk before the new offset is returned.
    pub fn put_chunk(&self, sid: Uuid, offset: u64, chunk: &[u8]) -> ApiResult<u64> {
        if chunk.len() > MAX_CHUNK_SIZE {
            return Err(ApiError::new(
                ErrorCode::ChunkTooLarge,
                format!("chunk of {} bytes exceeds {MAX_CHUNK_SIZE}", chunk.len()),
            ));
        }
        let entry = self.session(sid)?;
        let mut s = entry.lock();
        if s.meta.state != SessionState::Open {
            return Err(ApiError::new(
                ErrorCode::SessionClosed,
                format!("session is {:?}", s.meta.state),
            ));
        }
        if offset != s.meta.committed_offset {
            return Err(ApiError::new(
                ErrorCode::OffsetMismatch,
                format!(
                    "committed offset is {}, got {offset}",
                    s.meta.committed_offset
                ),
            ));
        }
        let end = offset + chunk.len() as u64;
        if end > s.meta.total_size {
            return Err(ApiError::new(
                ErrorCode::BadRequest,
                format!(
                    "chunk ends at {end}, past declared size {}",
                    s.meta.total_size
                ),
            ));
        }
        if !chunk.is_empty() {
            let mut f = OpenOptions::new().write(true).open(s.part_path())?;
            f.set_len(offset)?;
            f.seek(SeekFrom::Start(offset))?;
            f.write_all(chunk)?;
            f.sync_data()?;
            s.meta.committed_offset = end;
        }
        Ok(s.meta.committed_offset)
    }

    /// Verifies the received bytes and stores the observation. Repeating
    /// the call on a completed session returns the same stored id.
    pub fn complete_upload(&self, sid: Uuid, record: &ObservationRecord) -> ApiResult<Uuid> {
        let entry = self.session(sid)?;
        let project_id = entry.lock().meta.project_id.clone();
        let project = self.project(&project_id)?;
        let mut w = project.writer.lock();
        let mut s = entry.lock();
        match s.meta.state {
            SessionState::Complete => {
                return project
                    .view()
                    .by_digest
                    .get(&s.meta.content_digest)
                    .copied()
                    .ok_or_else(|| {
                        ApiError::internal("completed session without stored observation")
                    });
            }
            SessionState::Aborted => {
                return Err(ApiError::new(
                    ErrorCode::SessionClosed,
                    "session was aborted; begin a new upload",
                ));
            }
            SessionState::Open => {}
        }
        if s.meta.committed_offset < s.meta.total_size {
            return Err(ApiError::new(
                ErrorCode::Incomplete,
                format!(
                    "{} of {} bytes received",
                    s.meta.committed_offset, s.meta.total_size
                ),
            ));
        }
        if record.observation_id != s.meta.observation_id
            || record.content_digest != s.meta.content_digest
        {
            return Err(ApiError::new(
                ErrorCode::RecordInvalid,
                "record does not match the upload session",
            ));
        }
        let data = fs::read(s.part_path())?;
        let actual = sha256_hex(&data[..s.meta.total_size as usize]);
        if actual != s.meta.content_digest {
            s.close(SessionState::Aborted)?;
            w.open_sessions.remove(&s.meta.observation_id);
            return Err(ApiError::new(
                ErrorCode::DigestMismatch,
                format!("received bytes hash to {actual}; session aborted"),
            ));
        }
        let stored = self.ingest_locked(&project, &mut w, &data, record)?;
        s.close(SessionState::Complete)?;
        w.open_sessions.remove(&s.meta.observation_id);
        Ok(stored.observation_id)
    }

    // ---- observations ---------------------------------------------------

    /// Stores an observation once per content digest; duplicates return the
    /// existing row unchanged.
    pub fn ingest(
        &self,
        id: &str,
        media: &[u8],
        record: &ObservationRecord,
    ) -> ApiResult<StoredObservation> {
        let project = self.project(id)?;
        let mut w = project.writer.lock();
        self.ingest_locked(&project, &mut w, media, record)
    }

    fn ingest_locked(
        &self,
        project: &Project,
        w: &mut WriterState,
        media: &[u8],
        record: &ObservationRecord,
    ) -> ApiResult<StoredObservation> {
        let view = project.view();
        let invalid = |m: String| ApiError::new(ErrorCode::RecordInvalid, m);
        if record.project_id != view.manifest.project_id {
            return Err(invalid(format!(
                "record belongs to project {:?}",
                record.project_id
            )));
        }
        let digest = sha256_hex(media);
        if record.content_digest != digest {
            return Err(invalid("content_digest does not match the media".into()));
        }
        if let Some(existing) = view.by_digest.get(&digest) {
            return Ok(view.observations[existing].as_ref().clone());
        }
        if view.observations.contains_key(&record.observation_id) {
            return Err(invalid(format!(
                "observation id {} already used",
                record.observation_id
            )));
        }
        let label_count = view.manifest.labels.len();
        if let Some(bad) = record
            .detections
            .iter()
            .position(|d| !d.is_valid_for(label_count))
        {
            return Err(invalid(format!(
                "detections[{bad}] is invalid for {label_count} labels"
            )));
        }
        if let Some(sensor) = &record.sensor {
            sensor.validate().map_err(invalid)?;
        }
        if view.manifest.capture.require_gps && record.sensor.is_none() {
            return Err(invalid("project requires a sensor frame".into()));
        }

        let media_path = format!("{MEDIA_DIR}/{digest}.png");
        let target = project.dir.join(&media_path);
        if !target.exists() {
            write_atomic(&target, media)?;
        }
        let stored = StoredObservation {
            observation_id: record.observation_id,
            project_id: record.project_id.clone(),
            content_digest: digest,
            media_path,
            captured_at: record.captured_at,
            sensor: record.sensor,
            detections: record.detections.clone(),
            model_version: record.model_version.clone(),
            received_at: Utc::now(),
            review: None,
            review_history: Vec::new(),
            server_detections: None,
        };
        project.commit(
            w,
            Event::Ingested {
                observation: stored.clone(),
            },
        )?;
        let size = media.len() as u64;
        project.replace_view(|v| v.media_bytes += size);
        self.observation_index
            .write()
            .insert(stored.observation_id, view.manifest.project_id.clone());
        Ok(stored)
    }

    pub fn observation(&self, oid: Uuid) -> ApiResult<StoredObservation> {
        let project = self.project_of(oid)?;
        let view = project.view();
        view.observations
            .get(&oid)
            .map(|o| o.as_ref().clone())
            .ok_or_else(|| unknown_observation(oid))
    }

    pub fn media(&self, oid: Uuid) -> ApiResult<Vec<u8>> {
        let project = self.project_of(oid)?;
        let obs = self.observation(oid)?;
        fs::read(project.dir.join(&obs.media_path))
            .map_err(|e| ApiError::new(ErrorCode::MediaMissing, format!("{}: {e}", obs.media_path)))
    }

    pub fn list_observations(
        &self,
        id: &str,
        filter: &ObservationFilter,
        limit: Option<usize>,
        cursor: Option<&str>,
    ) -> ApiResult<ObservationPage> {
        let view = self.project(id)?.view();
        let limit = limit.unwrap_or(DEFAULT_LIMIT).clamp(1, MAX_LIMIT);
        let after = match cursor {
            Some(c) => Some(
                decode_cursor(c)
                    .ok_or_else(|| ApiError::new(ErrorCode::BadCursor, "unreadable cursor"))?,
            ),
            None => None,
        };
        let keys: Box<dyn Iterator<Item = &SortKey>> = match after {
            Some(k) => Box::new(
                view.order
                    .range((std::ops::Bound::Excluded(k), std::ops::Bound::Unbounded)),
            ),
            None => Box::new(view.order.iter()),
        };
        let mut items: Vec<(SortKey, StoredObservation)> = keys
            .map(|k| (*k, view.observations[&k.observation_id].as_ref()))
            .filter(|(_, o)| filter.matches(o))
            .take(limit + 1)
            .map(|(k, o)| (k, o.clone()))
            .collect();
        let next_cursor = if items.len() > limit {
            items.truncate(limit);
            items.last().map(|(k, _)| encode_cursor(k))
        } else {
            None
        };
        Ok(ObservationPage {
            items: items.into_iter().map(|(_, o)| o).collect(),
            next_cursor,
        })
    }

    // ---- review ---------------------------------------------------------

    pub fn submit_review(&self, oid: Uuid, request: ReviewRequest) -> ApiResult<StoredObservation> {
        let project = self.project_of(oid)?;
        let mut w = project.writer.lock();
        let view = project.view();
        if !view.observations.contains_key(&oid) {
            return Err(unknown_observation(oid));
        }
        let malformed = |m: String| ApiError::new(ErrorCode::MalformedDecision, m);
        if request.reviewer.trim().is_empty() {
            return Err(malformed("reviewer must not be empty".into()));
        }
        if request.verdict != Verdict::Correct && !request.corrected_detections.is_empty() {
            return Err(malformed(format!(
                "corrected_detections must be empty for verdict {:?}",
                request.verdict
            )));
        }
        let label_count = view.manifest.labels.len();
        if let Some(bad) = request
            .corrected_detections
            .iter()
            .position(|d| !d.is_valid_for(label_count))
        {
            return Err(malformed(format!("corrected_detections[{bad}] is invalid")));
        }
        let decision = ReviewDecision {
            verdict: request.verdict,
            corrected_detections: request.corrected_detections,
            reviewer: request.reviewer,
            decided_at: request.decided_at.unwrap_or_else(Utc::now),
        };
        let next = project.commit(
            &mut w,
            Event::Reviewed {
                observation_id: oid,
                decision,
            },
        )?;
        Ok(next.observations[&oid].as_ref().clone())
    }

    /// The default verification model: the published reference detector
    /// with its grid refined twofold.
    pub fn verification_model(&self, id: &str) -> ApiResult<RefDetModel> {
        let bytes = self.model_bytes(id)?;
        let parts = open_bundle(&bytes, None).map_err(ApiError::internal)?;
        if parts.meta.engine_id != refdet::ENGINE_ID {
            return Err(ApiError::new(
                ErrorCode::UnknownEngine,
                format!(
                    "no verification model derivable from engine {:?}",
                    parts.meta.engine_id
                ),
            ));
        }
        let mut model = RefDetModel::from_payload(&parts.payload).map_err(ApiError::internal)?;
        model.grid = (model.grid * 2).min(64);
        Ok(model)
    }

    /// Runs the verification model on the stored media and records the
    /// result next to (not over) the device detections. Without an explicit
    /// model the project's [`Registry::verification_model`] is used.
    pub fn rescore_observation(
        &self,
        oid: Uuid,
        model: Option<&RefDetModel>,
    ) -> ApiResult<Vec<Detection>> {
        let project = self.project_of(oid)?;
        let derived;
        let model = match model {
            Some(m) => m,
            None => {
                let pid = project.view().manifest.project_id.clone();
                derived = self.verification_model(&pid)?;
                &derived
            }
        };
        let label_count = project.view().manifest.labels.len();
        model
            .validate(Some(label_count))
            .map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()))?;
        let media = self.media(oid)?;
        let image = decode_png(&media).map_err(|e| {
            ApiError::new(
                ErrorCode::MediaMissing,
                format!("stored media is unreadable: {e}"),
            )
        })?;
        let detections = refdet::infer(model, &image);
        let mut w = project.writer.lock();
        project.commit(
            &mut w,
            Event::Rescored {
                observation_id: oid,
                detections: detections.clone(),
            },
        )?;
        Ok(detections)
    }

    // ---- snapshots ------------------------------------------------------

    pub fn export_snapshot(&self, id: &str) -> ApiResult<DatasetSnapshot> {
        let project = self.project(id)?;
        let _w = project.writer.lock();
        let view = project.view();
        let snapshot = build_snapshot(
            view.last_snapshot + 1,
            &view.manifest,
            Utc::now(),
            view.ordered(),
        )
        .ok_or_else(|| {
            ApiError::new(
                ErrorCode::NothingReviewed,
                "no reviewed observations to export",
            )
        })?;
        let path = project
            .dir
            .join(SNAPSHOTS_DIR)
            .join(format!("snapshot-{}.json", snapshot.snapshot_id));
        write_canonical(&path, &snapshot)?;
        let n = snapshot.snapshot_id;
        project.replace_view(|v| v.last_snapshot = n);
        Ok(snapshot)
    }

    /// Canonical JSON bytes of a stored snapshot.
    pub fn snapshot_bytes(&self, id: &str, n: u64) -> ApiResult<Vec<u8>> {
        let project = self.project(id)?;
        fs::read(
            project
                .dir
                .join(SNAPSHOTS_DIR)
                .join(format!("snapshot-{n}.json")),
        )
        .map_err(|_| ApiError::new(ErrorCode::NotFound, format!("no snapshot {n}")))
    }
}
