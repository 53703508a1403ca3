//! FieldForge primary server: project registry, observation stores, the
//! resumable upload endpoints, expert review and dataset snapshots.

pub mod error;
pub mod http;
pub mod pagination;
pub mod registry;
pub mod snapshot;
pub mod storage;

pub use error::{ApiError, ApiResult};
pub use http::{router, serve, BackgroundServer};
pub use registry::{ObservationFilter, Registry, ServerConfig};
