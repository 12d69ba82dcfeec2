//! Rotation-equivariant vector-neuron layers and a two-stage keypoint pose pipeline.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: rotations, rigid transforms, uniform rotation sampling and the
//!   weighted SVD rigid fit that turns voted keypoints into a pose.
//! - [`backprojection`]: depth image + intrinsics to a camera-frame point cloud.
//! - [`vn`]: vector-list features and the equivariant layer kit (linear, ReLU,
//!   mean pooling, batch norm) plus the equivariant-to-invariant layer.
//! - [`heads`]: appearance encoder and the segmentation / keypoint-offset heads.
//! - [`losses`]: focal, L1 offset, equivariance-consistency losses and their weighted sum.
//! - [`network`]: the full per-scene model composed from the pieces above.
//! - [`pipeline`]: instance assignment, keypoint voting and pose fitting.
//! - [`metrics`]: ADD, ADD-S, AUC and diameter-relative hit rates.
//! - [`synth`]: synthetic object models and labelled scenes.
//! - [`trainer`]: initialisation, optimisers, training loop and gradient checking.
//! - [`io`]: PGM / PLY / JSON readers and writers for the file formats above.
//!
//! Rotations act on column vectors in [`geometry`] (`x ↦ R·x`) and on row
//! vectors inside vector-list features (`v ↦ v·R`). [`vn::rotate_feature`] is
//! the only place that applies the row convention.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backprojection;
pub mod geometry;
pub mod heads;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod trainer;
pub mod vn;

pub use geometry::{Correspondences, RigidTransform, Rotation};

/// Deterministic generator used for every random draw in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
