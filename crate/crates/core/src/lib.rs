//! Dual point cloud transformer networks for point cloud classification and
//! part segmentation, built on a small reverse-mode autodiff engine.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tape`] – dense arrays and the gradient tape.
//! * [`geom`] – farthest point sampling, neighborhoods and interpolation.
//! * [`attention`] – point-wise and channel-wise multi-head self-attention
//!   and the dual block that sums them.
//! * [`layers`] – down-sampling, up-sampling, pooling and classifier layers.
//! * [`model`], [`optim`], [`train`], [`metrics`] – network assembly,
//!   optimization and evaluation.
//! * [`data`], [`config`], [`checkpoint`] – file formats and synthetic data.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod geom;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use param::{Module, Param};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
