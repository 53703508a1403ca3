//! Client side of the upload protocol.
//!
//! [`run_sync`] drains the local upload queue through any [`SyncApi`]
//! implementation: offset-serialized chunk uploads that resume from the
//! server's committed offset, idempotent completion, then a model update
//! check.

use semver::Version;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::capture::{CaptureError, Observation, ObservationState, ObservationStore};
use crate::protocol::{
    BeginUploadRequest, ErrorCode, ModelUpdate, ObservationRecord, SessionState, UploadSession,
    DEFAULT_CHUNK_SIZE, MAX_CHUNK_SIZE,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SyncError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    /// The connection broke mid-request after `sent` body bytes went out.
    #[error("connection lost after {sent} bytes: {message}")]
    Transport { sent: u64, message: String },
    #[error("{code} ({status}): {message}")]
    Api {
        status: u16,
        code: String,
        message: String,
    },
    #[error("local store: {0}")]
    Local(String),
}

impl SyncError {
    pub fn api(code: ErrorCode, message: impl Into<String>) -> Self {
        SyncError::Api {
            status: code.http_status(),
            code: code.as_str().to_string(),
            message: message.into(),
        }
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            SyncError::Api { code, .. } => ErrorCode::parse(code),
            _ => None,
        }
    }

    fn is_retryable(&self) -> bool {
        match self {
            SyncError::Unreachable(_) | SyncError::Transport { .. } => true,
            SyncError::Api { .. } => matches!(
                self.code(),
                Some(ErrorCode::DigestMismatch | ErrorCode::OffsetMismatch | ErrorCode::Internal)
            ),
            SyncError::Local(_) => false,
        }
    }
}

impl From<CaptureError> for SyncError {
    fn from(e: CaptureError) -> Self {
        SyncError::Local(e.to_string())
    }
}

/// The server operations the sync engine needs.
pub trait SyncApi {
    fn begin_upload(
        &self,
        project_id: &str,
        req: &BeginUploadRequest,
    ) -> Result<UploadSession, SyncError>;
    fn upload_status(&self, session_id: Uuid) -> Result<UploadSession, SyncError>;
    /// Returns the new committed offset.
    fn put_chunk(&self, session_id: Uuid, offset: u64, chunk: &[u8]) -> Result<u64, SyncError>;
    /// Returns the id under which the server stores the observation.
    fn complete_upload(
        &self,
        session_id: Uuid,
        record: &ObservationRecord,
    ) -> Result<Uuid, SyncError>;
    fn check_model_update(
        &self,
        project_id: &str,
        current: Option<&Version>,
    ) -> Result<ModelUpdate, SyncError>;
    fn download_model(&self, project_id: &str) -> Result<Vec<u8>, SyncError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncPolicy {
    /// Extra attempts per observation after a retryable failure.
    pub max_retries: u32,
    pub chunk_size: usize,
}

impl Default for SyncPolicy {
    fn default() -> Self {
        SyncPolicy {
            max_retries: 3,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub observation_id: Uuid,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub uploaded: u64,
    /// Uploads that continued from a non-zero server offset.
    pub resumed: u64,
    pub failed: u64,
    pub bytes_sent: u64,
    pub model_updated: bool,
    pub failures: Vec<ItemFailure>,
    pub model_error: Option<String>,
}

/// Uploads every observation in `selected`, `failed` or (after an
/// interrupted run) `uploading`, then checks for a newer model.
pub fn run_sync(store: &mut ObservationStore, api: &dyn SyncApi, policy: SyncPolicy) -> SyncReport {
    let policy = SyncPolicy {
        chunk_size: policy.chunk_size.clamp(1, MAX_CHUNK_SIZE),
        ..policy
    };
    let mut report = SyncReport::default();
    let queue: Vec<Observation> = store
        .list_observations(None)
        .into_iter()
        .filter(|o| {
            matches!(
                o.state,
                ObservationState::Selected | ObservationState::Failed | ObservationState::Uploading
            )
        })
        .collect();

    for obs in queue {
        let id = obs.observation_id;
        let outcome = sync_one(store, api, &obs, policy, &mut report);
        let final_state = match &outcome {
            Ok(()) => ObservationState::Uploaded,
            Err(_) => ObservationState::Failed,
        };
        let marked = if store.get(id).map(|o| o.state) == Some(ObservationState::Uploading) {
            store
                .transition_state(id, final_state)
                .map(|_| ())
                .map_err(SyncError::from)
        } else {
            Ok(())
        };
        match outcome.and(marked) {
            Ok(()) => report.uploaded += 1,
            Err(e) => {
                report.failed += 1;
                report.failures.push(ItemFailure {
                    observation_id: id,
                    error: e.to_string(),
                });
            }
        }
    }

    match update_model(store, api) {
        Ok(updated) => report.model_updated = updated,
        Err(e) => report.model_error = Some(e.to_string()),
    }
    report
}

fn sync_one(
    store: &mut ObservationStore,
    api: &dyn SyncApi,
    obs: &Observation,
    policy: SyncPolicy,
    report: &mut SyncReport,
) -> Result<(), SyncError> {
    if obs.state != ObservationState::Uploading {
        store.transition_state(obs.observation_id, ObservationState::Uploading)?;
    }
    let media = store.read_media(obs)?;
    let mut counted_resume = false;
    let mut attempt = 0;
    loop {
        match upload_once(
            store.project_id(),
            api,
            obs,
            &media,
            policy,
            report,
            &mut counted_resume,
        ) {
            Ok(()) => return Ok(()),
            Err(e) if e.is_retryable() && attempt < policy.max_retries => attempt += 1,
            Err(e) => return Err(e),
        }
    }
}

fn upload_once(
    project_id: &str,
    api: &dyn SyncApi,
    obs: &Observation,
    media: &[u8],
    policy: SyncPolicy,
    report: &mut SyncReport,
    counted_resume: &mut bool,
) -> Result<(), SyncError> {
    let total = media.len() as u64;
    let request = BeginUploadRequest {
        observation_id: obs.observation_id,
        content_digest: obs.content_digest.clone(),
        total_size: total,
    };
    let session = api.begin_upload(project_id, &request)?;
    if session.state == SessionState::Open && session.committed_offset > 0 && !*counted_resume {
        report.resumed += 1;
        *counted_resume = true;
    }
    if session.state == SessionState::Aborted {
        return Err(SyncError::api(
            ErrorCode::SessionClosed,
            "server returned an aborted session",
        ));
    }

    let mut offset = session.committed_offset;
    while session.state == SessionState::Open && offset < total {
        let end = (offset as usize + policy.chunk_size).min(media.len());
        let chunk = &media[offset as usize..end];
        match api.put_chunk(session.session_id, offset, chunk) {
            Ok(committed) => {
                report.bytes_sent += chunk.len() as u64;
                offset = committed;
            }
            Err(e) if e.code() == Some(ErrorCode::OffsetMismatch) => {
                report.bytes_sent += chunk.len() as u64;
                offset = api.upload_status(session.session_id)?.committed_offset;
            }
            Err(e) => {
                if let SyncError::Transport { sent, .. } = &e {
                    report.bytes_sent += sent;
                }
                return Err(e);
            }
        }
    }

    api.complete_upload(session.session_id, &ObservationRecord::from(obs))?;
    Ok(())
}

fn update_model(store: &mut ObservationStore, api: &dyn SyncApi) -> Result<bool, SyncError> {
    let current = store.installed_model()?.map(|m| m.version);
    match api.check_model_update(store.project_id(), current.as_ref())? {
        ModelUpdate::NoChange => Ok(false),
        ModelUpdate::NewBundle(info) => {
            if current.as_ref().is_some_and(|c| info.meta.version <= *c) {
                return Ok(false);
            }
            let bytes = api.download_model(store.project_id())?;
            store.install_model(&bytes, Some(&info.digest))?;
            Ok(true)
        }
    }
}
