//! Annotation-free few-shot segmentation.
//!
//! The support object is estimated without masks by partitioning the
//! normalized Laplacian of a deep-feature affinity graph (sign of the Fiedler
//! vector, bounding box of the smaller region). Per-level prototypes pooled
//! from that box condition a query decoder built from cross large-kernel
//! attention and multi-scale attention gates.
//!
//! Module map:
//! - [`tensorkit`]: dense tensors, convolution/normalization/resize kernels and
//!   a reverse-mode tape.
//! - [`spectral`]: hypercolumns, affinities, Laplacians, eigensolvers,
//!   Fiedler partitioning and prototype pooling.
//! - [`decoder`]: CLKA fusion, MS-AG gates, the four-block decoder and loss.
//! - [`episodic`]: datasets, episode sampling, the frozen toy encoder,
//!   training and inference.
//! - [`metrics`]: IoU, Dice, Hammoude distance, XOR and report aggregation.
//! - [`iocli`]: NPY/PGM formats, configuration, checkpoints and the CLI.

pub mod decoder;
pub mod episodic;
pub mod error;
pub mod iocli;
pub mod metrics;
pub mod spectral;
pub mod tensorkit;

pub use error::{Error, NpyError, Result};
