//! Desk-scale hierarchical RL sketching agent.
//!
//! Two independently trained policies cooperate to reproduce a target
//! raster image with physical pen strokes: a stroke planner chooses short
//! straight segments on an imaginary canvas, and a joint-space controller
//! drives a 6-DoF kinematic chain so the pentip realizes each segment.
//! At deployment the planner's imaginary canvas is kept aligned with the
//! simulated real canvas by synchronizing on the pentip position computed
//! through forward kinematics.

pub mod canvas;
pub mod commander;
pub mod deployment;
pub mod error;
pub mod kinematics;
pub mod nn;
pub mod sac;
pub mod similarity;
pub mod stroker;

pub use error::{Error, Result};
