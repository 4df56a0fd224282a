//! Range-visual-inertial odometry library.
//!
//! An error-state EKF fusing IMU propagation with hybrid SLAM/MSCKF visual
//! updates and ranged-facet terrain measurements from a 1-D laser range
//! finder, plus a synthetic sensor simulator and a numerical observability
//! analyzer for the linearized system.

pub mod error;
pub mod filter;
pub mod geom;
pub mod manager;
pub mod msckf;
pub mod observability;
pub mod range;
pub mod sim;
pub mod slam;
pub mod state;
pub mod vio;

pub use error::{Error, Result};
pub use geom::{quat_mul, skew, small_angle_quat, Mat3, Mat4, Quat, Vec3};
pub use state::{
    apply_correction, CameraExtrinsics, ErrorCovariance, ErrorLayout, Feature, FeatureStatus,
    FullState, InertialState, SlidingWindow, WorldModel,
};
