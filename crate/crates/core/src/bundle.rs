//! Model bundles: deterministic tar archives holding `bundle.json`,
//! `labels.json` and `model.bin`, identified by the SHA-256 of the archive.

use std::io::{Cursor, Read};

use chrono::{DateTime, Utc};
use semver::Version;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon;
use crate::detect::Detection;
use crate::digest::sha256_hex;
use crate::manifest::LabelDef;
use crate::raster::RgbImage;
use crate::refdet::{self, RefDetModel};

pub const META_ENTRY: &str = "bundle.json";
pub const LABELS_ENTRY: &str = "labels.json";
pub const MODEL_ENTRY: &str = "model.bin";

/// Engines this build can instantiate.
pub const REGISTERED_ENGINES: &[&str] = &[refdet::ENGINE_ID];

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle declares {expected} labels but {actual} were supplied")]
    LabelCountMismatch { expected: u32, actual: usize },
    #[error("invalid bundle metadata: {0}")]
    InvalidMeta(String),
    #[error("digest mismatch: expected {expected}, archive hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("unknown engine {0:?}")]
    UnknownEngine(String),
    #[error("invalid model payload: {0}")]
    InvalidPayload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub engine_id: String,
    pub version: Version,
    pub label_count: u32,
    pub input: InputSpec,
    pub created_at: DateTime<Utc>,
}

impl BundleMeta {
    pub fn validate(&self) -> Result<(), BundleError> {
        if self.engine_id.is_empty() {
            return Err(BundleError::InvalidMeta("engine_id is empty".into()));
        }
        if self.label_count < 1 {
            return Err(BundleError::InvalidMeta(
                "label_count must be at least 1".into(),
            ));
        }
        if self.input.width < 16 || self.input.height < 16 {
            return Err(BundleError::InvalidMeta(format!(
                "input {}x{} is smaller than 16x16",
                self.input.width, self.input.height
            )));
        }
        if self.input.channels != 3 {
            return Err(BundleError::InvalidMeta(format!(
                "input must have 3 channels, got {}",
                self.input.channels
            )));
        }
        Ok(())
    }
}

/// Contents of an opened bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleParts {
    pub meta: BundleMeta,
    pub labels: Vec<LabelDef>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct PackedBundle {
    pub bytes: Vec<u8>,
    pub digest: String,
}

/// Writes a tar archive with zeroed timestamps and ownership. Entries are
/// written in the order given.
pub(crate) fn write_tar(entries: &[(&str, &[u8])]) -> Vec<u8> {
    let mut builder = tar::Builder::new(Vec::new());
    for (name, data) in entries {
        let mut header = tar::Header::new_ustar();
        header.set_entry_type(tar::EntryType::Regular);
        header.set_path(name).expect("entry names are short ASCII");
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_cksum();
        builder.append(&header, *data).expect("writing to a Vec");
    }
    builder.into_inner().expect("writing to a Vec")
}

/// Reads every regular entry of a tar archive, in archive order.
pub(crate) fn read_tar(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, String> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(512) {
        return Err("archive length is not a positive multiple of 512".into());
    }
    let mut archive = tar::Archive::new(Cursor::new(bytes));
    let mut out = Vec::new();
    for entry in archive.entries().map_err(|e| e.to_string())? {
        let mut entry = entry.map_err(|e| e.to_string())?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            return Err("archive contains a non-file entry".into());
        }
        let name = entry
            .path()
            .map_err(|e| e.to_string())?
            .to_string_lossy()
            .into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(|e| e.to_string())?;
        out.push((name, data));
    }
    Ok(out)
}

/// Packs metadata, labels and the engine payload into a bundle.
pub fn pack_bundle(
    meta: &BundleMeta,
    model_payload: &[u8],
    labels: &[LabelDef],
) -> Result<PackedBundle, BundleError> {
    meta.validate()?;
    if labels.len() != meta.label_count as usize {
        return Err(BundleError::LabelCountMismatch {
            expected: meta.label_count,
            actual: labels.len(),
        });
    }
    let meta_json = canon::to_vec(meta).map_err(|e| BundleError::InvalidMeta(e.to_string()))?;
    let labels_json = canon::to_vec(labels).map_err(|e| BundleError::InvalidMeta(e.to_string()))?;
    let bytes = write_tar(&[
        (META_ENTRY, &meta_json),
        (LABELS_ENTRY, &labels_json),
        (MODEL_ENTRY, model_payload),
    ]);
    let digest = sha256_hex(&bytes);
    Ok(PackedBundle { bytes, digest })
}

/// Verifies and unpacks a bundle. The digest is checked first when given.
pub fn open_bundle(
    bytes: &[u8],
    expected_digest: Option<&str>,
) -> Result<BundleParts, BundleError> {
    if let Some(expected) = expected_digest {
        let actual = sha256_hex(bytes);
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(BundleError::DigestMismatch {
                expected: expected.to_string(),
                actual,
            });
        }
    }
    let entries = read_tar(bytes).map_err(BundleError::MalformedArchive)?;
    let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    if names != [META_ENTRY, LABELS_ENTRY, MODEL_ENTRY] {
        return Err(BundleError::MalformedArchive(format!(
            "expected entries [bundle.json, labels.json, model.bin], found {names:?}"
        )));
    }
    let mut entries = entries.into_iter().map(|(_, data)| data);
    let (meta_json, labels_json, payload) = (
        entries.next().unwrap(),
        entries.next().unwrap(),
        entries.next().unwrap(),
    );
    let meta: BundleMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| BundleError::MalformedArchive(format!("bundle.json: {e}")))?;
    meta.validate()
        .map_err(|e| BundleError::MalformedArchive(e.to_string()))?;
    let labels: Vec<LabelDef> = serde_json::from_slice(&labels_json)
        .map_err(|e| BundleError::MalformedArchive(format!("labels.json: {e}")))?;
    if labels.len() != meta.label_count as usize {
        return Err(BundleError::MalformedArchive(format!(
            "labels.json holds {} labels, bundle.json declares {}",
            labels.len(),
            meta.label_count
        )));
    }
    if !REGISTERED_ENGINES.contains(&meta.engine_id.as_str()) {
        return Err(BundleError::UnknownEngine(meta.engine_id));
    }
    Ok(BundleParts {
        meta,
        labels,
        payload,
    })
}

/// The interface every on-device engine implements.
pub trait Detector: Send + Sync {
    /// Raw engine output for one image.
    fn detect(&self, image: &RgbImage) -> Vec<Detection>;
    fn nms_iou_threshold(&self) -> f64;
    fn max_detections(&self) -> usize;
}

impl Detector for RefDetModel {
    fn detect(&self, image: &RgbImage) -> Vec<Detection> {
        refdet::infer(self, image)
    }

    fn nms_iou_threshold(&self) -> f64 {
        self.nms_iou_threshold
    }

    fn max_detections(&self) -> usize {
        self.max_detections as usize
    }
}

/// Builds the detector for a registered engine from its payload.
pub fn instantiate(
    engine_id: &str,
    payload: &[u8],
    label_count: usize,
) -> Result<Box<dyn Detector>, BundleError> {
    match engine_id {
        refdet::ENGINE_ID => {
            let model = RefDetModel::from_payload(payload)
                .map_err(|e| BundleError::InvalidPayload(e.to_string()))?;
            model
                .validate(Some(label_count))
                .map_err(|e| BundleError::InvalidPayload(e.to_string()))?;
            Ok(Box::new(model))
        }
        other => Err(BundleError::UnknownEngine(other.to_string())),
    }
}

/// A verified bundle with its engine ready to run.
pub struct LoadedModel {
    pub meta: BundleMeta,
    pub labels: Vec<LabelDef>,
    pub digest: String,
    pub detector: Box<dyn Detector>,
}

impl std::fmt::Debug for LoadedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedModel")
            .field("meta", &self.meta)
            .field("digest", &self.digest)
            .finish_non_exhaustive()
    }
}

impl LoadedModel {
    pub fn from_bundle(bytes: &[u8], expected_digest: Option<&str>) -> Result<Self, BundleError> {
        let parts = open_bundle(bytes, expected_digest)?;
        let detector = instantiate(&parts.meta.engine_id, &parts.payload, parts.labels.len())?;
        Ok(LoadedModel {
            meta: parts.meta,
            labels: parts.labels,
            digest: sha256_hex(bytes),
            detector,
        })
    }

    pub fn version(&self) -> &Version {
        &self.meta.version
    }
}
