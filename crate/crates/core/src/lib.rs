//! Basis-representation deep subspace clustering for hyperspectral images.
//!
//! The pipeline groups labeled pixels of a hyperspectral cube into `k` classes:
//!
//! 1. first-neighbor agglomeration ([`finch`]) groups large spatial-spectral
//!    patches into mini-clusters;
//! 2. a dense autoencoder ([`autoencoder`]) is pretrained on smaller patches;
//! 3. k-means on the latent codes seeds one orthonormal basis per class
//!    ([`subspace`]);
//! 4. the autoencoder and the bases are trained jointly under reconstruction,
//!    basis dissimilarity, mini-cluster consistency and spatial smoothing
//!    losses ([`constraints`], [`trainer`]).
//!
//! Differentiation is done by the small tape in [`autodiff`].

pub mod autodiff;
pub mod autoencoder;
pub mod constraints;
pub mod data;
pub mod error;
pub mod finch;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod subspace;
pub mod trainer;

pub use autodiff::{grad_check, GradCheck, Gradients, Tape, Var, WindowIndex};
pub use autoencoder::{AutoencoderParams, Checkpoint};
pub use constraints::{MiniClusterAssignment, SmoothedAssignment};
pub use data::{HsiCube, PatchSet, SceneSpec};
pub use error::{Error, Result};
pub use finch::{Metric, MiniClusterPartition, PartitionHierarchy};
pub use linalg::{Matrix, Real};
pub use metrics::{ContingencyTable, Scores};
pub use subspace::{AssignmentMatrix, BasisSet};
pub use trainer::{BatchMode, LossBreakdown, RunOutcome, RunState, TrainConfig};
