//! Batch fusion of per-frame open-vocabulary instance masks into a globally
//! consistent 3D panoptic labeling of a reconstructed scene, plus a dense
//! voxel panoptic field fitted by volume-rendering losses.
//!
//! The pipeline runs in stages: superface clustering over the mesh, a voting
//! graph over superpoints that is cut into 3D instances, per-frame 2D/3D id
//! association with class voting and label correction, partial-label
//! propagation through PCA-reduced dense features, and finally a two-stage
//! voxel field fit. `synth` generates seeded ground-truth scenes so every
//! stage has an exact oracle.

pub mod associate;
pub mod field;
pub mod instgraph;
pub mod metrics;
pub mod pipeline;
pub mod propagate;
pub mod rasterizer;
pub mod scene_io;
pub mod superface;
pub mod synth;

use thiserror::Error;

/// Sentinel instance id meaning "no instance".
pub const UNLABELED: u32 = 0;
/// Sentinel class id meaning "no class".
pub const UNKNOWN: u32 = 0;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at {offset}: {msg}")]
    Parse { msg: String, offset: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("empty mesh: {0}")]
    EmptyMesh(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate superface {0}")]
    DegenerateSuperface(u32),
    #[error("no center node for mask {0}")]
    NoCenter(u32),
    #[error("numerical divergence: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;
