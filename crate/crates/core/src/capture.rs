//! Participant-side observation store.
//!
//! One directory per project:
//!
//! ```text
//! <store>/project.json        manifest the store is bound to
//! <store>/media/<digest>.png  captured media, content addressed
//! <store>/journal.ndjson      append-only observation records
//! <store>/model/              installed model bundles
//! ```
//!
//! Every change to an observation appends its full record to the journal;
//! the last record for an id wins. A line only counts once its newline is
//! on disk, so readers never see torn records, and the writer trims any
//! unterminated tail when it opens the store.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use semver::Version;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::bundle::{BundleError, LoadedModel};
use crate::canon;
use crate::detect::{postprocess, Detection};
use crate::digest::sha256_hex;
use crate::manifest::{self, ManifestError, ProjectManifest, MANIFEST_FILE};
use crate::raster::{decode_png, ImageDecodeError};

pub const JOURNAL_FILE: &str = "journal.ndjson";
pub const MEDIA_DIR: &str = "media";
pub const MODEL_DIR: &str = "model";
const CURRENT_MODEL_FILE: &str = "current.json";

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("project requires GPS but no sensor frame was supplied")]
    MissingSensor,
    #[error("invalid sensor frame: {0}")]
    InvalidSensor(String),
    #[error(transparent)]
    ImageDecode(#[from] ImageDecodeError),
    #[error("local storage is full")]
    StorageFull,
    #[error("unknown observation {0}")]
    UnknownObservation(Uuid),
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition {
        from: ObservationState,
        to: ObservationState,
    },
    #[error("store is bound to project {bound:?}, not {requested:?}")]
    ProjectMismatch { bound: String, requested: String },
    #[error("model does not fit the project: {0}")]
    ModelMismatch(String),
    #[error("corrupt journal at line {line}: {message}")]
    CorruptJournal { line: usize, message: String },
    #[error("no model installed in the store")]
    NoModel,
    #[error("store handle is unusable after an injected crash")]
    InjectedCrash,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CaptureError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            CaptureError::StorageFull
        } else {
            CaptureError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub latitude: f64,
    pub longitude: f64,
    pub gps_accuracy: f64,
    pub heading: f64,
    pub captured_at: DateTime<Utc>,
}

impl SensorFrame {
    pub fn validate(&self) -> Result<(), String> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(format!("latitude {} out of range", self.latitude));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(format!("longitude {} out of range", self.longitude));
        }
        // written this way round so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.gps_accuracy >= 0.0) {
            return Err(format!(
                "gps accuracy {} must be a non-negative number",
                self.gps_accuracy
            ));
        }
        if !(0.0..360.0).contains(&self.heading) {
            return Err(format!("heading {} not in [0, 360)", self.heading));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationState {
    Captured,
    Selected,
    Uploading,
    Uploaded,
    Failed,
}

impl ObservationState {
    /// Edges of the lifecycle. `Selected -> Captured` is the deselect edge.
    pub fn can_transition_to(self, to: ObservationState) -> bool {
        use ObservationState::*;
        matches!(
            (self, to),
            (Captured, Selected)
                | (Selected, Captured)
                | (Selected, Uploading)
                | (Uploading, Uploaded)
                | (Uploading, Failed)
                | (Failed, Uploading)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub observation_id: Uuid,
    pub project_id: String,
    /// Relative to the store directory.
    pub media_path: String,
    pub content_digest: String,
    pub sensor: Option<SensorFrame>,
    pub detections: Vec<Detection>,
    pub model_version: String,
    pub captured_at: DateTime<Utc>,
    pub state: ObservationState,
}

/// Points in `record` where a crash can be simulated.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Media is on disk, journal untouched.
    AfterMediaWrite,
    /// Half of the journal line is written, without its newline.
    TornJournalLine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstalledModel {
    pub version: Version,
    pub digest: String,
    pub file: String,
}

pub struct ObservationStore {
    dir: PathBuf,
    manifest: ProjectManifest,
    index: BTreeMap<Uuid, Observation>,
    quota_bytes: Option<u64>,
    crash_at: Option<CrashPoint>,
    poisoned: bool,
}

impl ObservationStore {
    /// Opens the store at `dir`, creating it and binding it to `manifest`
    /// if needed. An existing store keeps its project but takes the newer
    /// manifest contents.
    pub fn create_or_open(dir: &Path, manifest: &ProjectManifest) -> Result<Self, CaptureError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let bound = manifest::parse(&fs::read(&manifest_path)?)?;
            if bound.project_id != manifest.project_id {
                return Err(CaptureError::ProjectMismatch {
                    bound: bound.project_id,
                    requested: manifest.project_id.clone(),
                });
            }
        }
        fs::create_dir_all(dir.join(MEDIA_DIR))?;
        write_atomic(&manifest_path, &manifest::canonicalize(manifest)?)?;
        Self::open(dir)
    }

    /// Opens an existing store as its single writer.
    pub fn open(dir: &Path) -> Result<Self, CaptureError> {
        let manifest = manifest::parse(&fs::read(dir.join(MANIFEST_FILE))?)?;
        fs::create_dir_all(dir.join(MEDIA_DIR))?;
        trim_torn_tail(&dir.join(JOURNAL_FILE))?;
        let index = load_index(dir)?;
        Ok(ObservationStore {
            dir: dir.to_path_buf(),
            manifest,
            index,
            quota_bytes: None,
            crash_at: None,
            poisoned: false,
        })
    }

    /// Caps the total size of stored media.
    pub fn with_quota(mut self, bytes: u64) -> Self {
        self.quota_bytes = Some(bytes);
        self
    }

    #[doc(hidden)]
    pub fn inject_crash(&mut self, point: CrashPoint) {
        self.crash_at = Some(point);
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &ProjectManifest {
        &self.manifest
    }

    pub fn project_id(&self) -> &str {
        &self.manifest.project_id
    }

    fn check_alive(&self) -> Result<(), CaptureError> {
        if self.poisoned {
            Err(CaptureError::InjectedCrash)
        } else {
            Ok(())
        }
    }

    /// Runs the on-device model over `media`, stores it, and journals a new
    /// observation in state `captured`.
    pub fn record_observation(
        &mut self,
        media: &[u8],
        sensor: Option<SensorFrame>,
        model: &LoadedModel,
    ) -> Result<Observation, CaptureError> {
        self.check_alive()?;
        if self.manifest.capture.require_gps && sensor.is_none() {
            return Err(CaptureError::MissingSensor);
        }
        if let Some(s) = &sensor {
            s.validate().map_err(CaptureError::InvalidSensor)?;
        }
        if model.labels.len() != self.manifest.labels.len() {
            return Err(CaptureError::ModelMismatch(format!(
                "model has {} labels, project has {}",
                model.labels.len(),
                self.manifest.labels.len()
            )));
        }
        let image = decode_png(media)?;
        let raw = model.detector.detect(&image);
        let detections = postprocess(
            &raw,
            self.manifest.capture.min_confidence_to_suggest,
            model.detector.nms_iou_threshold(),
            model.detector.max_detections(),
        );

        let content_digest = sha256_hex(media);
        let media_path = format!("{MEDIA_DIR}/{content_digest}.png");
        let target = self.dir.join(&media_path);
        if !target.exists() {
            if let Some(quota) = self.quota_bytes {
                if self.media_bytes_used()? + media.len() as u64 > quota {
                    return Err(CaptureError::StorageFull);
                }
            }
            write_atomic(&target, media)?;
        }

        let obs = Observation {
            observation_id: Uuid::new_v4(),
            project_id: self.manifest.project_id.clone(),
            media_path,
            content_digest,
            sensor,
            detections,
            model_version: model.meta.version.to_string(),
            captured_at: sensor.map(|s| s.captured_at).unwrap_or_else(Utc::now),
            state: ObservationState::Captured,
        };
        match self.crash_at {
            Some(CrashPoint::AfterMediaWrite) => {
                self.poisoned = true;
                return Err(CaptureError::InjectedCrash);
            }
            Some(CrashPoint::TornJournalLine) => {
                let line = canon::to_vec(&obs).expect("observation serializes");
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(self.dir.join(JOURNAL_FILE))?;
                f.write_all(&line[..line.len() / 2])?;
                f.sync_data()?;
                self.poisoned = true;
                return Err(CaptureError::InjectedCrash);
            }
            None => {}
        }
        self.append(&obs)?;
        Ok(obs)
    }

    /// Marks an observation for upload, or takes it back out of the queue.
    pub fn set_selected(&mut self, id: Uuid, selected: bool) -> Result<Observation, CaptureError> {
        let current = self
            .get(id)
            .ok_or(CaptureError::UnknownObservation(id))?
            .state;
        let target = if selected {
            ObservationState::Selected
        } else {
            ObservationState::Captured
        };
        if current == target {
            return Ok(self.index[&id].clone());
        }
        self.transition_state(id, target)
    }

    pub fn transition_state(
        &mut self,
        id: Uuid,
        to: ObservationState,
    ) -> Result<Observation, CaptureError> {
        self.check_alive()?;
        let obs = self
            .index
            .get(&id)
            .ok_or(CaptureError::UnknownObservation(id))?;
        if !obs.state.can_transition_to(to) {
            return Err(CaptureError::IllegalTransition {
                from: obs.state,
                to,
            });
        }
        let mut next = obs.clone();
        next.state = to;
        self.append(&next)?;
        Ok(next)
    }

    pub fn get(&self, id: Uuid) -> Option<&Observation> {
        self.index.get(&id)
    }

    /// Observations ordered by capture time, then id.
    pub fn list_observations(&self, filter: Option<ObservationState>) -> Vec<Observation> {
        sorted(
            self.index
                .values()
                .filter(|o| filter.is_none_or(|s| o.state == s))
                .cloned()
                .collect(),
        )
    }

    pub fn read_media(&self, obs: &Observation) -> Result<Vec<u8>, CaptureError> {
        Ok(fs::read(self.dir.join(&obs.media_path))?)
    }

    fn media_bytes_used(&self) -> io::Result<u64> {
        let mut total = 0;
        for entry in fs::read_dir(self.dir.join(MEDIA_DIR))? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().ends_with(".png") {
                total += entry.metadata()?.len();
            }
        }
        Ok(total)
    }

    fn append(&mut self, obs: &Observation) -> Result<(), CaptureError> {
        let mut line = canon::to_vec(obs).expect("observation serializes");
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(JOURNAL_FILE))?;
        f.write_all(&line)?;
        f.sync_data()?;
        self.index.insert(obs.observation_id, obs.clone());
        Ok(())
    }

    pub fn installed_model(&self) -> Result<Option<InstalledModel>, CaptureError> {
        let path = self.dir.join(MODEL_DIR).join(CURRENT_MODEL_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let installed = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| CaptureError::Io(io::Error::new(io::ErrorKind::InvalidData, e)))?;
        Ok(Some(installed))
    }

    /// Verifies `bundle` (against `expected_digest` when given) and makes it
    /// the store's current model.
    pub fn install_model(
        &mut self,
        bundle: &[u8],
        expected_digest: Option<&str>,
    ) -> Result<LoadedModel, CaptureError> {
        let model = LoadedModel::from_bundle(bundle, expected_digest)?;
        if model.labels.len() != self.manifest.labels.len() {
            return Err(CaptureError::ModelMismatch(format!(
                "model has {} labels, project has {}",
                model.labels.len(),
                self.manifest.labels.len()
            )));
        }
        let model_dir = self.dir.join(MODEL_DIR);
        fs::create_dir_all(&model_dir)?;
        let file = format!("model-{}.bundle", model.meta.version);
        write_atomic(&model_dir.join(&file), bundle)?;
        let installed = InstalledModel {
            version: model.meta.version.clone(),
            digest: model.digest.clone(),
            file,
        };
        write_atomic(
            &model_dir.join(CURRENT_MODEL_FILE),
            &canon::to_vec(&installed).expect("serializes"),
        )?;
        Ok(model)
    }

    pub fn load_model(&self) -> Result<LoadedModel, CaptureError> {
        let installed = self.installed_model()?.ok_or(CaptureError::NoModel)?;
        let bytes = fs::read(self.dir.join(MODEL_DIR).join(&installed.file))?;
        Ok(LoadedModel::from_bundle(&bytes, Some(&installed.digest))?)
    }
}

fn sorted(mut obs: Vec<Observation>) -> Vec<Observation> {
    obs.sort_by(|a, b| {
        a.captured_at.cmp(&b.captured_at).then_with(|| {
            a.observation_id
                .to_string()
                .cmp(&b.observation_id.to_string())
        })
    });
    obs
}

/// Complete journal lines in file order. A trailing line without its
/// newline is ignored.
pub fn read_journal(dir: &Path) -> Result<Vec<Observation>, CaptureError> {
    let path = dir.join(JOURNAL_FILE);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(pos) => &bytes[..=pos],
        None => &[][..],
    };
    let mut out = Vec::new();
    for (i, line) in complete.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let obs = serde_json::from_slice(line).map_err(|e| CaptureError::CorruptJournal {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(obs);
    }
    Ok(out)
}

fn load_index(dir: &Path) -> Result<BTreeMap<Uuid, Observation>, CaptureError> {
    let mut index = BTreeMap::new();
    for obs in read_journal(dir)? {
        index.insert(obs.observation_id, obs);
    }
    Ok(index)
}

/// Lists a store without taking the writer role; safe while a writer runs.
pub fn list_store(
    dir: &Path,
    filter: Option<ObservationState>,
) -> Result<Vec<Observation>, CaptureError> {
    Ok(sorted(
        load_index(dir)?
            .into_values()
            .filter(|o| filter.is_none_or(|s| o.state == s))
            .collect(),
    ))
}

/// Per-observation state sequences in journal order.
pub fn state_history(dir: &Path) -> Result<BTreeMap<Uuid, Vec<ObservationState>>, CaptureError> {
    let mut history: BTreeMap<Uuid, Vec<ObservationState>> = BTreeMap::new();
    for obs in read_journal(dir)? {
        history
            .entry(obs.observation_id)
            .or_default()
            .push(obs.state);
    }
    Ok(history)
}

fn trim_torn_tail(path: &Path) -> io::Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if keep < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(keep as u64)?;
        f.sync_all()?;
    }
    Ok(())
}

/// Writes through a temporary sibling, fsyncs, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let tmp = parent.join(format!(
        ".{}.{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy())
            .unwrap_or_default(),
        Uuid::new_v4().simple()
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Ok(d) = File::open(parent) {
        let _ = d.sync_all();
    }
    Ok(())
}
