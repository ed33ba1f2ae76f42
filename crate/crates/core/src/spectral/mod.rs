//! Annotation-free support estimation.
//!
//! Pixel features from several encoder depths are stacked into a hypercolumn,
//! compared by thresholded cosine similarity, and the normalized Laplacian of
//! that affinity graph is decomposed. The sign of the Fiedler vector splits
//! the grid in two; the smaller side is taken as the object and its bounding
//! box drives per-level prototype pooling.

mod affinity;
mod eigen;
mod hypercolumn;
mod linalg;
mod partition;
mod prototype;

use serde::{Deserialize, Serialize};

pub use affinity::{affinity_matrix, laplacian, AffinityMatrix, Laplacian, LaplacianMode};
pub use eigen::{
    dense_symmetric_eigen, eigendecompose, lanczos_smallest, EigenSolver, EigenSystem, LanczosOptions, DENSE_LIMIT,
};
pub use hypercolumn::{build_hypercolumn, Hypercolumn};
pub use linalg::{DenseMatrix, LinearOperator};
pub use partition::{fiedler_partition, sign_partition, smaller_region_bbox, BBox, PartitionResult};
pub use prototype::{extract_prototype, global_average_pool, mean_prototypes, rescale_bbox, PrototypeSet, Provenance};

use crate::error::Result;
use crate::tensorkit::{Real, Tensor};

/// Settings of the spectral support estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    /// Affinity grid height and width.
    pub grid_h: usize,
    pub grid_w: usize,
    pub mode: LaplacianMode,
    /// Eigenpairs computed (only the Fiedler vector is consumed).
    pub n_vectors: usize,
    pub solver: EigenSolver,
    /// Seed of the Lanczos start vector.
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            grid_h: 50,
            grid_w: 50,
            mode: LaplacianMode::Symmetric,
            n_vectors: 5,
            solver: EigenSolver::Auto,
            seed: 0,
        }
    }
}

/// Everything the spectral pass produces for one support image.
#[derive(Clone, Debug)]
pub struct SupportEstimate {
    pub hypercolumn: Hypercolumn,
    pub eigen: EigenSystem,
    pub partition: PartitionResult,
    pub prototypes: PrototypeSet,
}

/// Full annotation-free path: hypercolumn, affinity, Laplacian, eigenpairs,
/// Fiedler partition, bbox and per-level prototypes.
pub fn estimate_support<T: Real>(pyramid: &[Tensor<T>], cfg: &SpectralConfig) -> Result<SupportEstimate> {
    let hypercolumn = build_hypercolumn(pyramid, cfg.grid_h, cfg.grid_w)?;
    let w = affinity_matrix(&hypercolumn);
    let lap = laplacian(&w, cfg.mode)?;
    let eigen = eigendecompose(&lap, cfg.n_vectors, cfg.solver, cfg.seed)?;
    let partition = fiedler_partition(&eigen, cfg.grid_h, cfg.grid_w)?;
    let prototypes =
        extract_prototype(pyramid, &partition.bbox, cfg.grid_h, cfg.grid_w)?.with_provenance(Provenance::Spectral);
    Ok(SupportEstimate {
        hypercolumn,
        eigen,
        partition,
        prototypes,
    })
}
