//! Continuous-time radar-leg-inertial odometry toolkit.
//!
//! The estimator represents the platform state with three uniform cumulative
//! B-splines (orientation on SO(3), ego-centric velocity, local gravity) plus
//! slowly varying bias terms, and fuses radar Doppler, leg kinematics, and
//! IMU measurements in a sliding-window factor graph. A synthetic sensor
//! suite and a trajectory/gravity evaluation module make the whole pipeline
//! testable without robot hardware.
//!
//! Crate layout:
//! - [`so3`]: rotation exp/log helpers shared by everything else
//! - [`spline`]: order-3 cumulative B-splines on R^3 and SO(3)
//! - [`radar`]: instantaneous ego-velocity from Doppler scans (RANSAC + LSQ)
//! - [`leg`]: quadruped forward/inverse kinematics and contact velocity
//! - [`factors`]: residual functions of the factor graph
//! - [`solver`]: Levenberg-Marquardt over manifold blocks, marginalization
//! - [`pipeline`]: initialization, windowed optimization, dead reckoning
//! - [`sim`]: ground-truth scenarios and sensor synthesis
//! - [`dataset`]: JSONL dataset and TUM trajectory I/O
//! - [`eval`]: APE/RPE and gravity-direction metrics
//! - [`cli`]: subcommand implementations behind the `garlileo` binary

pub use nalgebra;

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod factors;
pub mod leg;
pub mod pipeline;
pub mod radar;
pub mod sim;
pub mod so3;
pub mod solver;
pub mod spline;

// Re-exports are added as modules land.



