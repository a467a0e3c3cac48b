//! Temporal masked auto-encoding for pillarized LiDAR-like point-cloud
//! sequences.
//!
//! A previous frame and a heavily masked current frame are voxelized into
//! pillars, encoded by one shared windowed-attention encoder, fused with
//! windowed cross-attention, densified, diffused with 3×3 convolutions and
//! decoded into per-pillar point sets scored with a Chamfer loss.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod params;
pub mod pillars;
pub mod tensor;
pub mod training;
pub mod windows;

pub use config::{RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use geometry::{Point, PointFrame, Pose};
pub use io::{Checkpoint, RngState};
pub use model::{Architecture, ForwardOutput, ModelConfig};
pub use params::{Bound, Moments, ParamStore};
pub use pillars::{GridConfig, MaskSplit, PillarSet};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use windows::WindowPartition;
