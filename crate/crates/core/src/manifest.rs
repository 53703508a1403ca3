//! Project manifests: the configuration shared by authoring tools, the
//! participant client and the server.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon;
use crate::digest::is_sha256_hex;

pub const SCHEMA_VERSION: u32 = 1;

/// Manifest file name at a project root.
pub const MANIFEST_FILE: &str = "project.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("invalid project id {0:?}: expected 3-64 chars of [a-z0-9-]")]
    InvalidSlug(String),
    #[error("invalid manifest: {0}")]
    Invalid(ValidationReport),
    #[error("malformed manifest JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

/// An 8-bit RGB triple, serialized as `[r, g, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Rgb([r, g, b])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDef {
    pub id: u32,
    pub name: String,
    pub display_color: Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Image,
    /// Declared for forward compatibility; capture only handles images.
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureConfig {
    pub require_gps: bool,
    pub media_types: Vec<MediaType>,
    /// Detections below this confidence are not shown as guidance.
    pub min_confidence_to_suggest: f64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            require_gps: true,
            media_types: vec![MediaType::Image],
            min_confidence_to_suggest: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub engine_id: String,
    pub version: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub schema_version: u32,
    pub project_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub labels: Vec<LabelDef>,
    pub capture: CaptureConfig,
    #[serde(default)]
    pub model_ref: Option<ModelRef>,
    #[serde(default)]
    pub server_base: Option<String>,
    #[serde(default)]
    pub tutorial: Vec<String>,
}

/// Checks the project id grammar: 3-64 characters from `[a-z0-9-]`.
pub fn is_valid_slug(s: &str) -> bool {
    (3..=64).contains(&s.len())
        && s.bytes()
            .all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'-'))
}

/// A blank project: one placeholder label, default capture policy, no model.
pub fn new_from_template(project_id: &str, name: &str) -> Result<ProjectManifest, ManifestError> {
    if !is_valid_slug(project_id) {
        return Err(ManifestError::InvalidSlug(project_id.to_string()));
    }
    Ok(ProjectManifest {
        schema_version: SCHEMA_VERSION,
        project_id: project_id.to_string(),
        name: name.to_string(),
        description: String::new(),
        labels: vec![LabelDef {
            id: 0,
            name: "object".to_string(),
            display_color: Rgb::new(0, 114, 255),
        }],
        capture: CaptureConfig::default(),
        model_ref: None,
        server_base: None,
        tutorial: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

/// Collects every invariant violation, ordered by field path.
pub fn validate_manifest(m: &ProjectManifest) -> ValidationReport {
    let mut report = ValidationReport::default();

    if m.schema_version != SCHEMA_VERSION {
        report.push(
            "schema_version",
            format!("unsupported schema version {}", m.schema_version),
        );
    }
    if !is_valid_slug(&m.project_id) {
        report.push("project_id", "must be 3-64 chars of [a-z0-9-]");
    }

    if m.labels.is_empty() {
        report.push("labels", "at least one label is required");
    }
    let mut seen = HashSet::new();
    for (i, label) in m.labels.iter().enumerate() {
        if !seen.insert(label.id) {
            report.push(
                format!("labels[{i}].id"),
                format!("duplicate label id {}", label.id),
            );
        } else if label.id as usize != i {
            report.push(
                format!("labels[{i}].id"),
                format!("label ids must be contiguous from 0, expected {i}"),
            );
        }
        if label.name.trim().is_empty() {
            report.push(format!("labels[{i}].name"), "must not be empty");
        }
    }

    if m.capture.media_types.is_empty() {
        report.push("capture.media_types", "at least one media type is required");
    }
    let c = m.capture.min_confidence_to_suggest;
    if !(0.0..=1.0).contains(&c) {
        report.push("capture.min_confidence_to_suggest", "must lie in [0, 1]");
    }

    if let Some(model) = &m.model_ref {
        if model.engine_id.is_empty() {
            report.push("model_ref.engine_id", "must not be empty");
        }
        if semver::Version::parse(&model.version).is_err() {
            report.push("model_ref.version", "must be a semantic version");
        }
        if !is_sha256_hex(&model.digest) {
            report.push("model_ref.digest", "must be 64 lowercase hex characters");
        }
    }
    if let Some(base) = &m.server_base {
        match url::Url::parse(base) {
            Ok(u) if matches!(u.scheme(), "http" | "https") => {}
            _ => report.push("server_base", "must be an http(s) URL"),
        }
    }

    report.violations.sort_by(|a, b| a.path.cmp(&b.path));
    report
}

/// Canonical JSON bytes of a valid manifest.
pub fn canonicalize(m: &ProjectManifest) -> Result<Vec<u8>, ManifestError> {
    let report = validate_manifest(m);
    if !report.is_valid() {
        return Err(ManifestError::Invalid(report));
    }
    Ok(canon::to_vec(m)?)
}

pub fn parse(bytes: &[u8]) -> Result<ProjectManifest, ManifestError> {
    Ok(serde_json::from_slice(bytes)?)
}

impl ProjectManifest {
    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, id: u32) -> Option<&LabelDef> {
        self.labels.get(id as usize).filter(|l| l.id == id)
    }
}
