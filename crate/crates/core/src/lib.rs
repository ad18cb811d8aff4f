//! Spatial propagation networks.
//!
//! A row/column linear propagation operator whose per-step transformation
//! matrices are produced by a guidance CNN. Scanning a map in four directions
//! with one-way or three-way connections realizes a dense, learned affinity
//! matrix while every individual step stays sparse.
//!
//! Module map:
//! - [`tensor`] and [`io`]: dense grids, bilinear resampling, SPNT/PNM files.
//! - [`propagation`]: directional scans, max-pool integration, cascaded units
//!   and their exact reverse pass.
//! - [`stability`]: gate projection and Gershgorin diagnostics.
//! - [`affinity`]: brute-force dense propagation matrix and its Laplacian.
//! - [`guidance`]: small encoder/decoder CNN emitting gate tensors.
//! - [`training`]: toy segmentation-refinement data, loss, SGD and IoU.
//! - [`verify`] and [`gradcheck`]: executable property and gradient suites.

pub mod affinity;
pub mod config;
pub mod dense;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod io;
pub mod propagation;
pub mod stability;
pub mod tensor;
pub mod training;
pub mod verify;

pub mod cli;

pub use error::{Result, SpnError};
pub use propagation::{ConnectionKind, Direction, GateTensor, SpnConfig};
pub use tensor::{LabelMap, Map, Scalar};
