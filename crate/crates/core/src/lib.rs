//! Switch spaces: mixed-curvature product spaces whose components are chosen
//! per example by a sparse, noisy top-K gate.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: a small reverse-mode differentiation tape, parameter store
//!   and Adam.
//! - [`manifolds`]: stereographic constant-curvature models (Euclidean,
//!   Poincaré ball, projected sphere) and their gyrovector operations.
//! - [`product`]: signatures and decomposed product distances.
//! - [`gating`]: gate inputs, noisy top-K softmax gates, switch scoring and the
//!   load-balancing loss.
//! - [`embedding`]: embedding tables, learned curvatures and switch settings
//!   shared by the task heads.
//! - [`kg`] and [`rec`]: knowledge-graph completion and metric-learning
//!   recommendation heads.
//! - [`data`], [`metrics`], [`config`] and [`train`]: datasets, ranking
//!   metrics, run configuration and training loops.

pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod gating;
pub mod kg;
pub mod manifolds;
pub mod metrics;
pub mod numerics;
pub mod product;
pub mod rec;
pub mod train;

pub use error::{Error, Result};
