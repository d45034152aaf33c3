//! Multi-view ensemble Kalman smoothing of keypoint tracks.
//!
//! The numerical core is generic over [`Scalar`]; the aliases at the crate
//! root fix it to `f64`, which the pipeline stages use throughout.

pub mod calib;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod inflation;
pub mod linear;
pub mod nonlinear;
pub mod pipeline;
pub mod scalar;
pub mod smoothing;
pub mod ssm;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type Camera = calib::CameraModel<f64>;
pub type Rig = calib::Rig<f64>;
pub type Intrinsics = calib::Intrinsics<f64>;
pub type Distortion = calib::Distortion<f64>;
pub type Lgssm = ssm::Lgssm<f64>;
pub type PosteriorTrack = ssm::PosteriorTrack<f64>;
