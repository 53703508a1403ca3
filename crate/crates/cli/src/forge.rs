//! `forge`: researcher-side project authoring.
//!
//! Only `publish` talks to the network; every other command works on local
//! files and is deterministic for identical inputs.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use fieldforge_client::HttpClient;
use fieldforge_core::apppkg::{build_app, open_app};
use fieldforge_core::bundle::{open_bundle, pack_bundle, BundleMeta, InputSpec};
use fieldforge_core::manifest::{self, ProjectManifest, MANIFEST_FILE};
use fieldforge_core::protocol::ErrorCode;
use fieldforge_core::refdet::{RefDetModel, ENGINE_ID};
use fieldforge_core::sync::SyncError;
use semver::Version;
use serde_json::json;

use crate::{dispatch, emit, read, write, CliError, EXIT_INVALID, EXIT_OK};

/// Default package file name inside a project directory.
pub const PACKAGE_FILE: &str = "app.ffpkg";

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Author FieldForge projects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create a project directory with a template manifest.
    Init {
        dir: PathBuf,
        /// Project slug, [a-z0-9-]{3,64}.
        #[arg(long = "id")]
        project_id: String,
        #[arg(long)]
        name: String,
    },
    /// Check a project's manifest and print the violations.
    Validate { dir: PathBuf },
    /// Pack a reference-detector model into a bundle for the project.
    Pack {
        dir: PathBuf,
        /// Reference detector parameters as JSON.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        version: Version,
        /// Bundle timestamp; defaults to the Unix epoch so builds reproduce.
        #[arg(long, default_value = "1970-01-01T00:00:00Z")]
        created_at: DateTime<Utc>,
        #[arg(long, default_value_t = 320)]
        input_width: u32,
        #[arg(long, default_value_t = 320)]
        input_height: u32,
        /// Defaults to `<dir>/model-<version>.bundle`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine the manifest and a bundle into an installable package.
    BuildApp {
        dir: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Defaults to `<dir>/app.ffpkg`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Create the project on the server if needed and publish its model.
    Publish {
        dir: PathBuf,
        /// Defaults to `<dir>/app.ffpkg`.
        #[arg(long)]
        package: Option<PathBuf>,
        #[arg(long, env = "FIELDFORGE_SERVER")]
        server: String,
        /// Sent as a bearer token.
        #[arg(long, env = "FIELDFORGE_TOKEN", hide_env_values = true)]
        token: Option<String>,
    },
}

pub fn run(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> u8 {
    dispatch::<Cli>(args, out, err, |cli, out, err| match cli.command {
        Command::Init {
            dir,
            project_id,
            name,
        } => init(&dir, &project_id, &name, out),
        Command::Validate { dir } => validate(&dir, out),
        Command::Pack {
            dir,
            model,
            version,
            created_at,
            input_width,
            input_height,
            out: target,
        } => pack(
            &dir,
            &model,
            version,
            created_at,
            (input_width, input_height),
            target,
            out,
        ),
        Command::BuildApp {
            dir,
            bundle,
            out: target,
        } => build(&dir, &bundle, target, out),
        Command::Publish {
            dir,
            package,
            server,
            token,
        } => publish(&dir, package, &server, token, out, err),
    })
}

fn load_manifest(dir: &Path) -> Result<ProjectManifest, CliError> {
    manifest::parse(&read(&dir.join(MANIFEST_FILE))?).map_err(CliError::invalid)
}

fn init(dir: &Path, project_id: &str, name: &str, out: &mut dyn Write) -> Result<u8, CliError> {
    let io = |source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    };
    if dir.exists() && std::fs::read_dir(dir).map_err(io)?.next().is_some() {
        return Err(CliError::Invalid(format!("{} is not empty", dir.display())));
    }
    let m = manifest::new_from_template(project_id, name).map_err(CliError::invalid)?;
    std::fs::create_dir_all(dir).map_err(io)?;
    let path = dir.join(MANIFEST_FILE);
    write(
        &path,
        &manifest::canonicalize(&m).map_err(CliError::invalid)?,
    )?;
    emit(
        out,
        &json!({ "project_id": m.project_id, "manifest": path }),
    );
    Ok(EXIT_OK)
}

fn validate(dir: &Path, out: &mut dyn Write) -> Result<u8, CliError> {
    let report = manifest::validate_manifest(&load_manifest(dir)?);
    emit(
        out,
        &json!({ "valid": report.is_valid(), "violations": report.violations }),
    );
    Ok(if report.is_valid() {
        EXIT_OK
    } else {
        EXIT_INVALID
    })
}

fn pack(
    dir: &Path,
    model_path: &Path,
    version: Version,
    created_at: DateTime<Utc>,
    (width, height): (u32, u32),
    target: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<u8, CliError> {
    let m = load_manifest(dir)?;
    let model: RefDetModel = serde_json::from_slice(&read(model_path)?)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", model_path.display())))?;
    model
        .validate(Some(m.labels.len()))
        .map_err(CliError::invalid)?;
    let meta = BundleMeta {
        engine_id: ENGINE_ID.to_string(),
        version,
        label_count: m.labels.len() as u32,
        input: InputSpec {
            width,
            height,
            channels: 3,
        },
        created_at,
    };
    let packed = pack_bundle(&meta, &model.to_payload(), &m.labels).map_err(CliError::invalid)?;
    let path = target.unwrap_or_else(|| dir.join(format!("model-{}.bundle", meta.version)));
    write(&path, &packed.bytes)?;
    emit(
        out,
        &json!({ "bundle": path, "digest": packed.digest, "version": meta.version.to_string() }),
    );
    Ok(EXIT_OK)
}

fn build(
    dir: &Path,
    bundle_path: &Path,
    target: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<u8, CliError> {
    let m = load_manifest(dir)?;
    let report = manifest::validate_manifest(&m);
    if !report.is_valid() {
        return Err(CliError::Invalid(format!("invalid manifest: {report}")));
    }
    let (package, bytes) = build_app(&m, &read(bundle_path)?).map_err(CliError::invalid)?;
    write(
        &dir.join(MANIFEST_FILE),
        &manifest::canonicalize(&package.manifest).map_err(CliError::invalid)?,
    )?;
    let path = target.unwrap_or_else(|| dir.join(PACKAGE_FILE));
    write(&path, &bytes)?;
    emit(
        out,
        &json!({
            "package": path,
            "package_digest": package.package_digest,
            "bundle_digest": package.bundle_digest(),
        }),
    );
    Ok(EXIT_OK)
}

fn publish(
    dir: &Path,
    package: Option<PathBuf>,
    server: &str,
    token: Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<u8, CliError> {
    let path = package.unwrap_or_else(|| dir.join(PACKAGE_FILE));
    let app = open_app(&read(&path)?).map_err(CliError::invalid)?;
    let meta = open_bundle(&app.bundle, None)
        .map_err(CliError::invalid)?
        .meta;
    let project_id = app.manifest.project_id.clone();

    let mut client = HttpClient::new(server)?;
    if let Some(t) = token {
        client = client.with_token(t);
    }
    let mut created = false;
    let info = match client.project_info(&project_id) {
        Ok(info) => info,
        Err(e) if e.code() == Some(ErrorCode::UnknownProject) => {
            created = true;
            client.create_project(&app.manifest)?
        }
        Err(e) => return Err(e.into()),
    };
    if info.manifest.labels != app.manifest.labels {
        let _ = writeln!(
            err,
            "warning: server manifest labels differ from the package"
        );
    }

    let digest = app.bundle_digest();
    if let Some(current) = &info.published {
        if current.meta.version == meta.version && current.digest == digest {
            let _ = writeln!(
                err,
                "unchanged: {project_id} already serves {}",
                meta.version
            );
            emit(
                out,
                &json!({ "status": "unchanged", "project_id": project_id, "version": meta.version.to_string(), "digest": digest }),
            );
            return Ok(EXIT_OK);
        }
    }
    match client.publish_model(&project_id, &app.bundle) {
        Ok(published) => {
            emit(
                out,
                &json!({
                    "status": "published",
                    "project_id": project_id,
                    "project_created": created,
                    "version": published.meta.version.to_string(),
                    "digest": published.digest,
                }),
            );
            Ok(EXIT_OK)
        }
        Err(e @ SyncError::Api { .. }) => Err(CliError::Invalid(format!(
            "server rejected the bundle: {e}"
        ))),
        Err(e) => Err(e.into()),
    }
}
