//! `fieldsim`: a headless participant client.
//!
//! `capture` ingests a directory of images the way the phone camera would,
//! entirely offline. `select` and `sync` mirror the app's save/upload
//! buttons.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use fieldforge_client::HttpClient;
use fieldforge_core::apppkg::open_app;
use fieldforge_core::bundle::open_bundle;
use fieldforge_core::capture::{CaptureError, Observation, ObservationState, ObservationStore};
use fieldforge_core::detect::BBox;
use fieldforge_core::manifest::{ProjectManifest, Rgb};
use fieldforge_core::sync::{run_sync, SyncPolicy};
use fieldforge_core::{canon, protocol};
use serde::Serialize;
use serde_json::json;
use uuid::Uuid;

use crate::sidecar::{parse_sidecar, sidecar_path};
use crate::{dispatch, emit, read, write, CliError, EXIT_INVALID, EXIT_OK, EXIT_PARTIAL};

pub const OVERLAY_DIR: &str = "overlays";

#[derive(Debug, Parser)]
#[command(
    name = "fieldsim",
    version,
    about = "Simulate a FieldForge participant device"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the packaged model over every PNG in a directory and store the
    /// observations locally.
    Capture {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        package: PathBuf,
        #[arg(long)]
        images: PathBuf,
    },
    /// Print the stored observations as JSON.
    List {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_parser = parse_state)]
        state: Option<ObservationState>,
    },
    /// Mark observations for upload (or take them back with --deselect).
    Select {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, conflicts_with = "ids")]
        all: bool,
        #[arg(long)]
        deselect: bool,
        ids: Vec<Uuid>,
    },
    /// Upload selected observations and fetch model updates.
    Sync {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, env = "FIELDFORGE_SERVER")]
        server: String,
        #[arg(long, env = "FIELDFORGE_TOKEN", hide_env_values = true)]
        token: Option<String>,
        /// Select every captured observation first.
        #[arg(long)]
        select_all: bool,
        /// Test hook: drop the link after this many chunk bytes.
        #[arg(long)]
        fail_after_bytes: Option<u64>,
        #[arg(long, default_value_t = protocol::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        #[arg(long, default_value_t = 3)]
        max_retries: u32,
    },
}

fn parse_state(s: &str) -> Result<ObservationState, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown state {s:?}; expected captured, selected, uploading, uploaded or failed")
    })
}

pub fn run(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> u8 {
    dispatch::<Cli>(args, out, err, |cli, out, err| match cli.command {
        Command::Capture {
            store,
            package,
            images,
        } => capture(&store, &package, &images, out, err),
        Command::List { store, state } => {
            let store = open_store(&store)?;
            emit(out, &store.list_observations(state));
            Ok(EXIT_OK)
        }
        Command::Select {
            store,
            all,
            deselect,
            ids,
        } => select(&store, all, !deselect, ids, out),
        Command::Sync {
            store,
            server,
            token,
            select_all,
            fail_after_bytes,
            chunk_size,
            max_retries,
        } => {
            let mut client = HttpClient::new(&server)?;
            if let Some(t) = token {
                client = client.with_token(t);
            }
            if let Some(n) = fail_after_bytes {
                client = client.with_fail_after_bytes(n);
            }
            sync(
                &store,
                &client,
                select_all,
                SyncPolicy {
                    max_retries,
                    chunk_size,
                },
                out,
            )
        }
    })
}

fn local(e: CaptureError) -> CliError {
    CliError::Invalid(e.to_string())
}

fn open_store(dir: &Path) -> Result<ObservationStore, CliError> {
    ObservationStore::open(dir)
        .map_err(|e| CliError::Invalid(format!("cannot open store {}: {e}", dir.display())))
}

#[derive(Serialize)]
struct OverlayDetection {
    label_id: u32,
    label_name: String,
    color: Rgb,
    bbox: BBox,
    confidence: f64,
}

#[derive(Serialize)]
struct Overlay {
    digest: String,
    model_version: String,
    detections: Vec<OverlayDetection>,
}

fn overlay(obs: &Observation, manifest: &ProjectManifest) -> Overlay {
    Overlay {
        digest: obs.content_digest.clone(),
        model_version: obs.model_version.clone(),
        detections: obs
            .detections
            .iter()
            .map(|d| {
                let label = manifest.label(d.label_id);
                OverlayDetection {
                    label_id: d.label_id,
                    label_name: label.map(|l| l.name.clone()).unwrap_or_default(),
                    color: label.map(|l| l.display_color).unwrap_or(Rgb::new(0, 0, 0)),
                    bbox: d.bbox,
                    confidence: d.confidence,
                }
            })
            .collect(),
    }
}

fn capture(
    store_dir: &Path,
    package: &Path,
    images: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<u8, CliError> {
    let app = open_app(&read(package)?).map_err(CliError::invalid)?;
    let mut store = ObservationStore::create_or_open(store_dir, &app.manifest).map_err(local)?;

    // install the packaged model unless the device already runs a newer one
    let packaged = open_bundle(&app.bundle, None)
        .map_err(CliError::invalid)?
        .meta
        .version;
    let installed = store.installed_model().map_err(local)?;
    if installed.as_ref().is_none_or(|m| m.version < packaged) {
        store
            .install_model(&app.bundle, Some(&app.bundle_digest()))
            .map_err(local)?;
    }
    let model = store.load_model().map_err(local)?;

    let mut files: Vec<PathBuf> = std::fs::read_dir(images)
        .map_err(|source| CliError::Io {
            path: images.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();

    let mut captured = Vec::new();
    let mut failures = Vec::new();
    for file in &files {
        let name = file
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        match capture_one(&mut store, &app.manifest, file, &model) {
            Ok(obs) => {
                let _ = writeln!(err, "{name}: {} detection(s)", obs.detections.len());
                captured.push(json!({
                    "file": name,
                    "observation_id": obs.observation_id,
                    "content_digest": obs.content_digest,
                    "detections": obs.detections.len(),
                }));
            }
            Err(e) => {
                let _ = writeln!(err, "{name}: error: {e}");
                failures.push(json!({ "file": name, "error": e.to_string() }));
            }
        }
    }
    let failed = failures.len();
    emit(
        out,
        &json!({ "captured": captured.len(), "errors": failed, "observations": captured, "failures": failures }),
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_INVALID })
}

fn capture_one(
    store: &mut ObservationStore,
    manifest: &ProjectManifest,
    file: &Path,
    model: &fieldforge_core::LoadedModel,
) -> Result<Observation, CliError> {
    let media = read(file)?;
    let sensor = match sidecar_path(file) {
        Some(path) => {
            let taken: DateTime<Utc> = std::fs::metadata(file)
                .and_then(|m| m.modified())
                .map(DateTime::from)
                .unwrap_or_else(|_| Utc::now());
            let text = String::from_utf8_lossy(&read(&path)?).into_owned();
            Some(
                parse_sidecar(&text, taken)
                    .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let obs = store
        .record_observation(&media, sensor, model)
        .map_err(local)?;
    let path = store
        .dir()
        .join(OVERLAY_DIR)
        .join(format!("{}.json", obs.content_digest));
    std::fs::create_dir_all(path.parent().expect("overlay path has a parent")).map_err(
        |source| CliError::Io {
            path: path.clone(),
            source,
        },
    )?;
    write(
        &path,
        &canon::to_vec(&overlay(&obs, manifest)).expect("overlay serializes"),
    )?;
    Ok(obs)
}

fn select(
    dir: &Path,
    all: bool,
    selected: bool,
    ids: Vec<Uuid>,
    out: &mut dyn Write,
) -> Result<u8, CliError> {
    let mut store = open_store(dir)?;
    let targets: Vec<Uuid> = if all {
        let from = if selected {
            ObservationState::Captured
        } else {
            ObservationState::Selected
        };
        store
            .list_observations(Some(from))
            .into_iter()
            .map(|o| o.observation_id)
            .collect()
    } else {
        ids
    };
    let mut changed = Vec::new();
    for id in targets {
        changed.push(
            store
                .set_selected(id, selected)
                .map_err(local)?
                .observation_id,
        );
    }
    emit(out, &json!({ "selected": selected, "changed": changed }));
    Ok(EXIT_OK)
}

fn sync(
    dir: &Path,
    client: &HttpClient,
    select_all: bool,
    policy: SyncPolicy,
    out: &mut dyn Write,
) -> Result<u8, CliError> {
    let mut store = open_store(dir)?;
    // refuse early, before touching local state, when the server is gone
    if let Err(e) = client.get_manifest(store.project_id()) {
        if let err @ CliError::Unreachable(_) = CliError::from(e) {
            return Err(err);
        }
    }
    if select_all {
        for obs in store.list_observations(Some(ObservationState::Captured)) {
            store
                .set_selected(obs.observation_id, true)
                .map_err(local)?;
        }
    }
    let report = run_sync(&mut store, client, policy);
    emit(out, &report);
    Ok(if report.failed == 0 {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}
