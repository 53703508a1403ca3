//! HTTP/JSON wire types shared by the server and its clients.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::bundle::BundleMeta;
use crate::capture::{Observation, SensorFrame};
use crate::detect::Detection;
use crate::manifest::ProjectManifest;

/// Largest chunk a server accepts in one `PUT`.
pub const MAX_CHUNK_SIZE: usize = 4 * 1024 * 1024;
pub const DEFAULT_CHUNK_SIZE: usize = 256 * 1024;

/// Machine-readable error codes carried in every error body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    BadRequest,
    BadCursor,
    ChunkTooLarge,
    DigestMismatch,
    DuplicateProject,
    Incomplete,
    Internal,
    InvalidManifest,
    LabelMismatch,
    MalformedArchive,
    MalformedDecision,
    MediaMissing,
    NotFound,
    NothingReviewed,
    OffsetMismatch,
    QuotaExceeded,
    RecordInvalid,
    SessionClosed,
    StaleVersion,
    UnknownEngine,
    UnknownObservation,
    UnknownProject,
    UnknownSession,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        use ErrorCode::*;
        match self {
            BadRequest | BadCursor => 400,
            NotFound | UnknownProject | UnknownObservation | UnknownSession | MediaMissing => 404,
            DuplicateProject | OffsetMismatch | Incomplete | SessionClosed | StaleVersion
            | NothingReviewed => 409,
            ChunkTooLarge => 413,
            DigestMismatch | InvalidManifest | LabelMismatch | MalformedArchive
            | MalformedDecision | RecordInvalid | UnknownEngine => 422,
            QuotaExceeded => 507,
            Internal => 500,
        }
    }

    pub fn as_str(self) -> &'static str {
        use ErrorCode::*;
        match self {
            BadRequest => "BadRequest",
            BadCursor => "BadCursor",
            ChunkTooLarge => "ChunkTooLarge",
            DigestMismatch => "DigestMismatch",
            DuplicateProject => "DuplicateProject",
            Incomplete => "Incomplete",
            Internal => "Internal",
            InvalidManifest => "InvalidManifest",
            LabelMismatch => "LabelMismatch",
            MalformedArchive => "MalformedArchive",
            MalformedDecision => "MalformedDecision",
            MediaMissing => "MediaMissing",
            NotFound => "NotFound",
            NothingReviewed => "NothingReviewed",
            OffsetMismatch => "OffsetMismatch",
            QuotaExceeded => "QuotaExceeded",
            RecordInvalid => "RecordInvalid",
            SessionClosed => "SessionClosed",
            StaleVersion => "StaleVersion",
            UnknownEngine => "UnknownEngine",
            UnknownObservation => "UnknownObservation",
            UnknownProject => "UnknownProject",
            UnknownSession => "UnknownSession",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeginUploadRequest {
    pub observation_id: Uuid,
    pub content_digest: String,
    pub total_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Complete,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadSession {
    pub session_id: Uuid,
    pub observation_id: Uuid,
    pub project_id: String,
    pub total_size: u64,
    pub committed_offset: u64,
    pub content_digest: String,
    pub state: SessionState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkAck {
    pub committed_offset: u64,
}

/// What a participant uploads about an observation; the local lifecycle
/// state and file path stay on the device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub observation_id: Uuid,
    pub project_id: String,
    pub content_digest: String,
    pub captured_at: DateTime<Utc>,
    pub sensor: Option<SensorFrame>,
    pub detections: Vec<Detection>,
    pub model_version: String,
}

impl From<&Observation> for ObservationRecord {
    fn from(o: &Observation) -> Self {
        ObservationRecord {
            observation_id: o.observation_id,
            project_id: o.project_id.clone(),
            content_digest: o.content_digest.clone(),
            captured_at: o.captured_at,
            sensor: o.sensor,
            detections: o.detections.clone(),
            model_version: o.model_version.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub observation_id: Uuid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub meta: BundleMeta,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelUpdate {
    NoChange,
    NewBundle(ModelInfo),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectInfo {
    pub manifest: ProjectManifest,
    pub published: Option<ModelInfo>,
    pub created_at: DateTime<Utc>,
    pub observation_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Confirm,
    Refute,
    Correct,
}

impl Verdict {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "confirm" => Some(Verdict::Confirm),
            "refute" => Some(Verdict::Refute),
            "correct" => Some(Verdict::Correct),
            _ => None,
        }
    }
}

/// Body of `POST /v1/observations/{oid}/review`. The server stamps
/// `decided_at` when it is omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub corrected_detections: Vec<Detection>,
    pub reviewer: String,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub verdict: Verdict,
    pub corrected_detections: Vec<Detection>,
    pub reviewer: String,
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredObservation {
    pub observation_id: Uuid,
    pub project_id: String,
    pub content_digest: String,
    /// Relative to the project's data store.
    pub media_path: String,
    pub captured_at: DateTime<Utc>,
    pub sensor: Option<SensorFrame>,
    pub detections: Vec<Detection>,
    pub model_version: String,
    pub received_at: DateTime<Utc>,
    /// Latest review; earlier ones are in `review_history`.
    pub review: Option<ReviewDecision>,
    pub review_history: Vec<ReviewDecision>,
    pub server_detections: Option<Vec<Detection>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationView {
    #[serde(flatten)]
    pub observation: StoredObservation,
    pub media_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPage {
    pub items: Vec<StoredObservation>,
    pub next_cursor: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Model,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotImage {
    pub content_digest: String,
    pub media: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotAnnotation {
    pub content_digest: String,
    pub detection: Detection,
    pub source: AnnotationSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCount {
    pub label_id: u32,
    pub label_name: String,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub confirm: u64,
    pub refute: u64,
    pub correct: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotStats {
    pub per_label: Vec<LabelCount>,
    pub per_verdict: VerdictCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub snapshot_id: u64,
    pub project_id: String,
    pub created_at: DateTime<Utc>,
    pub images: Vec<SnapshotImage>,
    pub annotations: Vec<SnapshotAnnotation>,
    pub stats: SnapshotStats,
}
