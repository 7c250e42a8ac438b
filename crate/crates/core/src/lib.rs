//! Point-cloud reinforcement learning for active target search and coverage.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: labeled point clouds, voxel filtering, farthest point
//!   sampling, nearest-neighbor grouping, PLY files.
//! * [`environment`]: a grid-world room with a simulated depth sensor.
//! * [`agents`]: greedy oracle and random baselines.
//! * [`network`]: the point-cloud Q-network and its building blocks, on top
//!   of the small reverse-mode engine in [`autodiff`].
//! * [`rl`]: distributional double-Q training with collision-aware replay.
//! * [`gradcheck`] and [`eval`]: verification and evaluation harnesses.

pub mod agents;
pub mod autodiff;
pub mod checkpoint;
pub mod environment;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod network;
pub mod params;
pub mod rl;
pub mod tensor;

pub use error::{Error, Result};
