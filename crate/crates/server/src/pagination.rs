//! Opaque keyset cursors over `(received_at, observation_id)`.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Utc};
use fieldforge_core::canon;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub const DEFAULT_LIMIT: usize = 50;
pub const MAX_LIMIT: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SortKey {
    pub received_at: DateTime<Utc>,
    pub observation_id: Uuid,
}

pub fn encode_cursor(after: &SortKey) -> String {
    URL_SAFE_NO_PAD.encode(canon::to_vec(after).expect("sort key serializes"))
}

pub fn decode_cursor(cursor: &str) -> Option<SortKey> {
    let bytes = URL_SAFE_NO_PAD.decode(cursor).ok()?;
    serde_json::from_slice(&bytes).ok()
}
