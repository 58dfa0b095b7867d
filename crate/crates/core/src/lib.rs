//! Level-of-detail compiler and CPU reference renderer for 3D Gaussian
//! splatting scenes.
//!
//! The pipeline turns a trained splat scene into smoothed and pruned LOD
//! levels, picks their depth thresholds by minimizing the rasterizer's
//! per-tile workload, partitions the camera space into chunks with
//! precomputed active sets, and blends between the two nearest chunks at
//! runtime. The tile rasterizer in [`raster`] is both the reference renderer
//! and the measurement instrument for every cost the pipeline optimizes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod blend;
pub mod chunk;
pub mod io;
pub mod lod;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod threshold;

pub use scene::{Camera, ChunkPlan, Gaussian, ImportanceScores, LodLevel, Scene};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ply: {0}")]
    Ply(String),
    #[error("cameras: {0}")]
    Cameras(String),
    #[error("asset: {0}")]
    Asset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// The innermost error, below any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_invariant(&self) -> bool {
        matches!(self.root(), Error::Invariant(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
