//! Core domain for the fieldforge platform.
//!
//! Everything in this crate works without a network: project manifests,
//! model bundles and the reference detector, the participant-side
//! observation store, and the sync engine (which talks to a server only
//! through the [`sync::SyncApi`] trait).

pub mod apppkg;
pub mod bundle;
pub mod canon;
pub mod capture;
pub mod detect;
pub mod digest;
pub mod manifest;
pub mod protocol;
pub mod raster;
pub mod refdet;
pub mod sync;

pub use bundle::{BundleMeta, InputSpec, LoadedModel};
pub use detect::{iou, nms, postprocess, BBox, Detection};
pub use manifest::{LabelDef, ProjectManifest, Rgb};
pub use refdet::RefDetModel;
