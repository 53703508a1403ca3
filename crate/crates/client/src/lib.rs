//! Blocking HTTP client for the FieldForge server.
//!
//! [`HttpClient`] implements [`SyncApi`] so the capture store can sync over
//! the network, and exposes the authoring and review endpoints for the CLI
//! and tests. Errors reuse [`SyncError`]: connection failures become
//! `Unreachable`, coded server errors become `Api`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use fieldforge_core::detect::Detection;
use fieldforge_core::manifest::ProjectManifest;
use fieldforge_core::protocol::*;
use fieldforge_core::refdet::RefDetModel;
use fieldforge_core::sync::{SyncApi, SyncError};
use reqwest::blocking::{Client, Response};
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};
use reqwest::{Method, StatusCode};
use semver::Version;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use url::Url;
use uuid::Uuid;

pub use fieldforge_core::sync::SyncError as ClientError;

pub type ClientResult<T> = Result<T, SyncError>;

/// Filters and paging for observation listings.
#[derive(Debug, Clone, Default)]
pub struct ListQuery {
    pub reviewed: Option<bool>,
    pub verdict: Option<Verdict>,
    pub limit: Option<usize>,
    pub cursor: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RescoreResult {
    pub observation_id: Uuid,
    pub server_detections: Vec<Detection>,
}

enum Body<'a> {
    Empty,
    Json(Vec<u8>),
    Bytes(&'a [u8]),
}

pub struct HttpClient {
    base: Url,
    http: Client,
    token: Option<String>,
    /// Remaining chunk bytes before the simulated link drops.
    budget: Mutex<Option<u64>>,
    dead: AtomicBool,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient")
            .field("base", &self.base.as_str())
            .finish()
    }
}

impl HttpClient {
    pub fn new(base_url: &str) -> ClientResult<Self> {
        let base = Url::parse(base_url)
            .map_err(|e| SyncError::Unreachable(format!("invalid server URL {base_url:?}: {e}")))?;
        let loopback = match base.host() {
            Some(url::Host::Ipv4(ip)) => ip.is_loopback(),
            Some(url::Host::Ipv6(ip)) => ip.is_loopback(),
            Some(url::Host::Domain(d)) => d == "localhost",
            None => false,
        };
        let mut builder = Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .timeout(Duration::from_secs(60));
        if loopback {
            builder = builder.no_proxy();
        }
        let http = builder
            .build()
            .map_err(|e| SyncError::Local(e.to_string()))?;
        Ok(HttpClient {
            base,
            http,
            token: None,
            budget: Mutex::new(None),
            dead: AtomicBool::new(false),
        })
    }

    /// Sent as a bearer token on every request.
    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    /// Simulates a link that dies once `bytes` of chunk payload have gone
    /// out: the chunk that crosses the limit and every later request fail
    /// with a transport error.
    pub fn with_fail_after_bytes(self, bytes: u64) -> Self {
        *self.budget.lock().unwrap() = Some(bytes);
        self
    }

    pub fn base_url(&self) -> &str {
        self.base.as_str()
    }

    fn url(&self, path: &str, query: &[(&str, String)]) -> Url {
        let mut url = self.base.join(path).expect("API paths are relative");
        if !query.is_empty() {
            url.query_pairs_mut()
                .extend_pairs(query.iter().map(|(k, v)| (*k, v.as_str())));
        }
        url
    }

    fn send(
        &self,
        method: Method,
        path: &str,
        query: &[(&str, String)],
        body: Body<'_>,
    ) -> ClientResult<Response> {
        if self.dead.load(Ordering::SeqCst) {
            return Err(SyncError::Transport {
                sent: 0,
                message: "link is down".into(),
            });
        }
        let mut req = self.http.request(method, self.url(path, query));
        if let Some(token) = &self.token {
            req = req.header(AUTHORIZATION, format!("Bearer {token}"));
        }
        req = match body {
            Body::Empty => req,
            Body::Json(bytes) => req.header(CONTENT_TYPE, "application/json").body(bytes),
            Body::Bytes(bytes) => req
                .header(CONTENT_TYPE, "application/octet-stream")
                .body(bytes.to_vec()),
        };
        let resp = req.send().map_err(transport_error)?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let bytes = resp.bytes().map_err(transport_error)?;
        Err(match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => SyncError::Api {
                status,
                code: body.code,
                message: body.message,
            },
            Err(_) => SyncError::Api {
                status,
                code: format!("Http{status}"),
                message: String::from_utf8_lossy(&bytes).into_owned(),
            },
        })
    }

    fn json<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        query: &[(&str, String)],
        body: Body<'_>,
    ) -> ClientResult<T> {
        let bytes = self
            .send(method, path, query, body)?
            .bytes()
            .map_err(transport_error)?;
        serde_json::from_slice(&bytes).map_err(|e| SyncError::Api {
            status: 200,
            code: "MalformedResponse".into(),
            message: e.to_string(),
        })
    }

    fn raw(&self, path: &str) -> ClientResult<Vec<u8>> {
        Ok(self
            .send(Method::GET, path, &[], Body::Empty)?
            .bytes()
            .map_err(transport_error)?
            .to_vec())
    }

    // ---- projects and models -------------------------------------------

    pub fn create_project(&self, manifest: &ProjectManifest) -> ClientResult<ProjectInfo> {
        self.json(Method::POST, "/v1/projects", &[], json_body(manifest))
    }

    pub fn list_projects(&self) -> ClientResult<Vec<ProjectInfo>> {
        self.json(Method::GET, "/v1/projects", &[], Body::Empty)
    }

    pub fn project_info(&self, project_id: &str) -> ClientResult<ProjectInfo> {
        self.json(
            Method::GET,
            &format!("/v1/projects/{project_id}"),
            &[],
            Body::Empty,
        )
    }

    pub fn get_manifest(&self, project_id: &str) -> ClientResult<ProjectManifest> {
        self.json(
            Method::GET,
            &format!("/v1/projects/{project_id}/manifest"),
            &[],
            Body::Empty,
        )
    }

    pub fn publish_model(&self, project_id: &str, bundle: &[u8]) -> ClientResult<ModelInfo> {
        self.json(
            Method::POST,
            &format!("/v1/projects/{project_id}/model"),
            &[],
            Body::Bytes(bundle),
        )
    }

    // ---- review and export ---------------------------------------------

    pub fn list_observations(
        &self,
        project_id: &str,
        query: &ListQuery,
    ) -> ClientResult<ObservationPage> {
        let mut q = Vec::new();
        if let Some(r) = query.reviewed {
            q.push(("reviewed", r.to_string()));
        }
        if let Some(v) = query.verdict {
            q.push((
                "verdict",
                serde_json::to_value(v)
                    .unwrap()
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
            ));
        }
        if let Some(l) = query.limit {
            q.push(("limit", l.to_string()));
        }
        if let Some(c) = &query.cursor {
            q.push(("cursor", c.clone()));
        }
        self.json(
            Method::GET,
            &format!("/v1/projects/{project_id}/observations"),
            &q,
            Body::Empty,
        )
    }

    /// Follows cursors until the listing is exhausted.
    pub fn list_all_observations(
        &self,
        project_id: &str,
        mut query: ListQuery,
    ) -> ClientResult<Vec<StoredObservation>> {
        let mut all = Vec::new();
        loop {
            let page = self.list_observations(project_id, &query)?;
            all.extend(page.items);
            match page.next_cursor {
                Some(c) => query.cursor = Some(c),
                None => return Ok(all),
            }
        }
    }

    pub fn get_observation(&self, oid: Uuid) -> ClientResult<ObservationView> {
        self.json(
            Method::GET,
            &format!("/v1/observations/{oid}"),
            &[],
            Body::Empty,
        )
    }

    pub fn media(&self, oid: Uuid) -> ClientResult<Vec<u8>> {
        self.raw(&format!("/v1/observations/{oid}/media"))
    }

    pub fn submit_review(
        &self,
        oid: Uuid,
        review: &ReviewRequest,
    ) -> ClientResult<ObservationView> {
        self.json(
            Method::POST,
            &format!("/v1/observations/{oid}/review"),
            &[],
            json_body(review),
        )
    }

    /// Re-scores with `model`, or with the server's verification model.
    pub fn rescore(&self, oid: Uuid, model: Option<&RefDetModel>) -> ClientResult<RescoreResult> {
        let body = model.map_or(Body::Empty, json_body);
        self.json(
            Method::POST,
            &format!("/v1/observations/{oid}/rescore"),
            &[],
            body,
        )
    }

    pub fn export_snapshot(&self, project_id: &str) -> ClientResult<DatasetSnapshot> {
        self.json(
            Method::POST,
            &format!("/v1/projects/{project_id}/snapshots"),
            &[],
            Body::Empty,
        )
    }

    /// The stored snapshot file, byte for byte.
    pub fn snapshot_bytes(&self, project_id: &str, n: u64) -> ClientResult<Vec<u8>> {
        self.raw(&format!("/v1/projects/{project_id}/snapshots/{n}"))
    }
}

fn json_body<T: Serialize + ?Sized>(value: &T) -> Body<'static> {
    Body::Json(fieldforge_core::canon::to_vec(value).expect("request types serialize"))
}

fn transport_error(e: reqwest::Error) -> SyncError {
    if e.is_connect() {
        SyncError::Unreachable(error_chain(&e))
    } else {
        SyncError::Transport {
            sent: 0,
            message: error_chain(&e),
        }
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        source = s.source();
    }
    msg
}

impl SyncApi for HttpClient {
    fn begin_upload(
        &self,
        project_id: &str,
        req: &BeginUploadRequest,
    ) -> ClientResult<UploadSession> {
        self.json(
            Method::POST,
            &format!("/v1/projects/{project_id}/uploads"),
            &[],
            json_body(req),
        )
    }

    fn upload_status(&self, session_id: Uuid) -> ClientResult<UploadSession> {
        self.json(
            Method::GET,
            &format!("/v1/uploads/{session_id}"),
            &[],
            Body::Empty,
        )
    }

    fn put_chunk(&self, session_id: Uuid, offset: u64, chunk: &[u8]) -> ClientResult<u64> {
        {
            let mut budget = self.budget.lock().unwrap();
            if let Some(left) = budget.as_mut() {
                let len = chunk.len() as u64;
                if len > *left {
                    let sent = *left;
                    *left = 0;
                    self.dead.store(true, Ordering::SeqCst);
                    return Err(SyncError::Transport {
                        sent,
                        message: format!("link dropped after {sent} of {len} chunk bytes"),
                    });
                }
                *left -= len;
            }
        }
        let ack: ChunkAck = self.json(
            Method::PUT,
            &format!("/v1/uploads/{session_id}/chunks"),
            &[("offset", offset.to_string())],
            Body::Bytes(chunk),
        )?;
        Ok(ack.committed_offset)
    }

    fn complete_upload(&self, session_id: Uuid, record: &ObservationRecord) -> ClientResult<Uuid> {
        let resp: CompleteResponse = self.json(
            Method::POST,
            &format!("/v1/uploads/{session_id}/complete"),
            &[],
            json_body(record),
        )?;
        Ok(resp.observation_id)
    }

    fn check_model_update(
        &self,
        project_id: &str,
        current: Option<&Version>,
    ) -> ClientResult<ModelUpdate> {
        let query: Vec<_> = current
            .map(|v| ("current", v.to_string()))
            .into_iter()
            .collect();
        let resp = self.send(
            Method::GET,
            &format!("/v1/projects/{project_id}/model"),
            &query,
            Body::Empty,
        )?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(ModelUpdate::NoChange);
        }
        let bytes = resp.bytes().map_err(transport_error)?;
        let info: ModelInfo = serde_json::from_slice(&bytes).map_err(|e| SyncError::Api {
            status: 200,
            code: "MalformedResponse".into(),
            message: e.to_string(),
        })?;
        Ok(ModelUpdate::NewBundle(info))
    }

    fn download_model(&self, project_id: &str) -> ClientResult<Vec<u8>> {
        self.raw(&format!("/v1/projects/{project_id}/model/download"))
    }
}
