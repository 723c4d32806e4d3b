//! Permutation-invariant deep networks on point sets.
//!
//! A point cloud is an unordered set, so every model here is built from a
//! per-point map shared across all points followed by a symmetric
//! aggregation (max pooling by default). The crate contains:
//!
//! * [`tensor`]: a small 64-bit reverse-mode engine with a finite-difference
//!   oracle and Adam.
//! * [`layers`]: shared per-point MLPs, order-invariant aggregators and
//!   canonical sorting.
//! * [`pointnet`]: alignment networks, the classification / segmentation /
//!   normal-estimation models, losses, parameter counting and checkpoints.
//! * [`analysis`]: critical point sets, upper-bound shapes, point-function
//!   grids, retrieval and correspondence.
//! * [`data`]: synthetic primitives, MNIST point sets, preprocessing,
//!   augmentation, furthest point sampling and corruption protocols.
//! * [`harness`]: training, metrics and experiment protocols.
//! * [`cli`]: the `setnet` command-line front end.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod pointnet;
pub mod tensor;

pub use error::{Error, Result};
