//! GNSS position-spoofing detection from network positions and onboard
//! motion data.

pub mod baselines;
pub mod cli;
pub mod evaluation;
pub mod fusion;
pub mod geo_frames;
pub mod gp_uncertainty;
pub mod loda_detector;
pub mod metrics;
pub mod motion_regression;
pub mod pipeline;
pub mod qp;
pub mod simulator;
pub mod trace_model;
