//! Language-conditioned grasp detection toolkit.
//!
//! A referring expression and an RGB image go through a small
//! vision-language network that predicts an object mask and dense grasp maps;
//! the mask gates the features feeding the grasp heads. Decoded planar grasps
//! can be lifted to 6-DoF poses over a depth point cloud.

pub mod autonet;
pub mod error;
pub mod geometry3d;
pub mod grasp_maps;
pub mod io_formats;
pub mod metrics;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
pub use geometry3d::{CameraIntrinsics, Grasp6DoF, GripperModel, PointCloud};
pub use grasp_maps::{GraspMaps, GraspRect};
pub use metrics::{Band, EvalRecord, EvalReport, Lexicon, SuccessCriteria};
