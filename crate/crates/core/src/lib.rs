//! Orientation estimation for projection images of D2-symmetric objects.
//!
//! Given 2D projection images of a molecule with D2 (222) point-group
//! symmetry, taken at unknown rotations, this crate estimates those rotations
//! using only the images themselves. The chain is:
//!
//! 1. [`commonlines`] — for every image pair, estimate the quadruple of
//!    relative rotations `{R_i^T g_m R_j}` by a grid search over candidate
//!    rotation pairs scored with common-line and self-common-line ray
//!    correlations.
//! 2. [`handsync`] — resolve the per-pair mirror (handedness) ambiguity with
//!    the leading eigenvector of a signed pair-graph adjacency matrix.
//! 3. [`rowsync`] — collapse each quadruple into three rank-1 outer products
//!    of rotation rows, and sort the products into three row classes via the
//!    two-dimensional leading eigenspace of a signed vertex graph.
//! 4. [`signsync`] — within each row class, synchronize the ±1 block signs so
//!    the stacked block matrix is rank 1, and factor out the row vectors.
//! 5. [`assemble`] — stack the three synchronized row fields into rotation
//!    matrices, fix determinants, and score against ground truth when known.
//!
//! [`simulate`] generates ground-truth data for every stage (analytic
//! Gaussian-blob phantoms, projections, polar Fourier rays, and corrupted
//! relative-rotation quadruples), and [`pipeline`] wires the stages together
//! behind a single seeded configuration.

pub mod assemble;
pub mod commonlines;
pub mod eigen;
pub mod geom;
pub mod grid;
pub mod handsync;
pub mod io;
pub mod pairs;
pub mod pipeline;
pub mod rowsync;
pub mod signsync;
pub mod simulate;

use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("degenerate view pair: beaming directions coincide for symmetry element g{m}")]
    DegenerateViewPair { m: usize },
    #[error("all self common lines are degenerate (beaming direction on a symmetry axis)")]
    AllDegenerate,
    #[error("candidate table has no admissible pairs")]
    NoAdmissibleCandidate,
    #[error("triangle ({i},{j},{k}) missing from configuration set")]
    MissingTriangle { i: usize, j: usize, k: usize },
    #[error("eigen iteration failed to converge within {max_iters} iterations (residual {residual:.3e})")]
    EigenFailure { max_iters: usize, residual: f64 },
    #[error("stacked row matrix ill-conditioned at image indices {indices:?}")]
    IllConditioned { indices: Vec<usize> },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("file format error: {0}")]
    Format(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub use assemble::{align_and_score, assemble_rotations, AlignmentReport, OrientationEstimate};
pub use commonlines::{
    estimate_all, estimate_relative_quadruple, pair_score, ray_correlations, QuadrupleSource,
    RayCorrMatrix, RelRotQuadruple,
};
pub use geom::{
    common_line_coords, common_line_directions, conjugate_by_j, klein_mul, self_common_line_coords,
    CommonLineCoords, KleinElement, Rotation,
};
pub use grid::{
    build_candidate_tables, inplane_rotations, sphere_grid, CandidateTable, SphereGrid,
};
pub use handsync::{build_sigma, synchronize_hands, triplet_config, SigmaMatrix, TripletConfig};
pub use pairs::PairVec;
pub use pipeline::{run_pipeline, PipelineConfig, PipelineInput, PipelineOutput};
pub use rowsync::{
    build_omega, partition_rows, quadruple_to_rank1_triple, triangle_permutations, unmix_u_alpha,
    ColorVector, OmegaMatrix, Rank1Triple,
};
pub use signsync::{
    adjust_signs, build_hn, build_s, estimate_self_products, RowField, SignMatrixS,
};
pub use simulate::{
    d2_phantom, polar_fourier, project, synth_quadruples, CorruptionSpec, GaussianBlob, Image,
    Phantom, PolarImage,
};
