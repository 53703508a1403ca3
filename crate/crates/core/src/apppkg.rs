//! App packages: the participant-installable combination of a project
//! manifest and its model bundle.

use thiserror::Error;

use crate::bundle::{self, read_tar, write_tar, BundleError, BundleParts};
use crate::digest::sha256_hex;
use crate::manifest::{self, ManifestError, ModelRef, ProjectManifest, MANIFEST_FILE};

pub const BUNDLE_ENTRY: &str = "model.bundle";

#[derive(Debug, Error)]
pub enum PackageError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("bundle labels do not match the manifest: {0}")]
    LabelMismatch(String),
    #[error("malformed package: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone)]
pub struct AppPackage {
    pub manifest: ProjectManifest,
    pub bundle: Vec<u8>,
    pub package_digest: String,
}

impl AppPackage {
    pub fn bundle_digest(&self) -> String {
        sha256_hex(&self.bundle)
    }
}

/// Checks that the bundle labels agree with the manifest by id and name.
pub fn check_labels(manifest: &ProjectManifest, parts: &BundleParts) -> Result<(), PackageError> {
    if parts.labels.len() != manifest.labels.len() {
        return Err(PackageError::LabelMismatch(format!(
            "bundle has {} labels, manifest has {}",
            parts.labels.len(),
            manifest.labels.len()
        )));
    }
    for (b, m) in parts.labels.iter().zip(&manifest.labels) {
        if b.id != m.id || b.name != m.name {
            return Err(PackageError::LabelMismatch(format!(
                "bundle label {} {:?} vs manifest label {} {:?}",
                b.id, b.name, m.id, m.name
            )));
        }
    }
    Ok(())
}

/// Points the manifest at the bundle and archives both. Returns the updated
/// manifest inside the package.
pub fn build_app(
    manifest: &ProjectManifest,
    bundle_bytes: &[u8],
) -> Result<(AppPackage, Vec<u8>), PackageError> {
    let parts = bundle::open_bundle(bundle_bytes, None)?;
    check_labels(manifest, &parts)?;
    let mut manifest = manifest.clone();
    manifest.model_ref = Some(ModelRef {
        engine_id: parts.meta.engine_id.clone(),
        version: parts.meta.version.to_string(),
        digest: sha256_hex(bundle_bytes),
    });
    let manifest_json = manifest::canonicalize(&manifest)?;
    let bytes = write_tar(&[
        (BUNDLE_ENTRY, bundle_bytes),
        (MANIFEST_FILE, &manifest_json),
    ]);
    let package = AppPackage {
        manifest,
        bundle: bundle_bytes.to_vec(),
        package_digest: sha256_hex(&bytes),
    };
    Ok((package, bytes))
}

/// Opens a package and verifies the manifest's model reference against the
/// embedded bundle.
pub fn open_app(bytes: &[u8]) -> Result<AppPackage, PackageError> {
    let entries = read_tar(bytes).map_err(PackageError::Malformed)?;
    let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    if names != [BUNDLE_ENTRY, MANIFEST_FILE] {
        return Err(PackageError::Malformed(format!(
            "expected entries [model.bundle, project.json], found {names:?}"
        )));
    }
    let mut it = entries.into_iter().map(|(_, d)| d);
    let (bundle_bytes, manifest_json) = (it.next().unwrap(), it.next().unwrap());
    let manifest = manifest::parse(&manifest_json)?;
    let report = manifest::validate_manifest(&manifest);
    if !report.is_valid() {
        return Err(ManifestError::Invalid(report).into());
    }
    let model_ref = manifest
        .model_ref
        .as_ref()
        .ok_or_else(|| PackageError::Malformed("manifest has no model_ref".into()))?;
    let parts = bundle::open_bundle(&bundle_bytes, Some(&model_ref.digest))?;
    check_labels(&manifest, &parts)?;
    Ok(AppPackage {
        manifest,
        bundle: bundle_bytes,
        package_digest: sha256_hex(bytes),
    })
}
