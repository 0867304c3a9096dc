//! Kinematic morphing networks: iterative depth-image regression of the
//! morphing parameters of a parametric object model, with self-augmented
//! training and an ICP baseline.

pub mod error;
pub mod eval;
pub mod icp;
pub mod kdtree;
pub mod kinematics;
pub mod pipeline;
pub mod regressor;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
pub use kinematics::{extract_params, to_affine, Affine3, MorphParams, ParamSchema};
pub use render::{Camera, DepthImage, MetricDepth, PointCloud};
pub use scene::{KinematicModel, Task, TaskDef};
