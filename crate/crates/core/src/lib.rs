//! Contact prediction on a template body mesh from a single synthetic image.
//!
//! The pipeline couples a small convolutional backbone, two graph-transformer
//! encoders over image, joint and vertex tokens, multi-path token perturbation
//! with per-vertex attention fusion, and heads for contact, mesh, semantic and
//! body-part outputs. A procedural scene generator supplies exact labels.

pub mod ablate;
pub mod backbone;
mod binio;
pub mod config;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod mesh;
pub mod model;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scenes;
pub mod simu;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use mesh::{EdgeGraph, MeshTemplate};
pub use model::{Model, PathSpec, Prediction};
pub use scenes::{Sample, SceneGenerator};
