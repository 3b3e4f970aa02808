//! Kronecker-factored Fisher approximations and natural gradient training for
//! fully connected networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense helpers, Kronecker products and the zigzag rearrangement.
//! - [`mlp`] and [`fisher`]: the network, backpropagation and per-layer statistics.
//! - [`kron_approx`]: rank-1 and rank-2 Kronecker factorizations of a Fisher block.
//! - [`precond`]: damping, running averages and inverse application.
//! - [`optim`]: the training loop and the approximation-error probe.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fisher;
pub mod kron_approx;
pub mod linalg;
pub mod mlp;
pub mod optim;
pub mod precond;

pub use error::{Error, Result};
pub use fisher::{LayerBatchStats, LayerStats};
pub use kron_approx::{Factors, KronPair, Method, SvdOptions};
pub use linalg::{Matrix, Vector};
pub use mlp::{Activation, GradientSet, LossKind, Mlp};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, StepReport};
pub use precond::{DampingSpec, KronApprox};
