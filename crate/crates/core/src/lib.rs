//! Single-image camera calibration with line queries and multi-scale
//! deformable attention.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape.
//! * [`line`]: homogeneous line geometry and vanishing-point pseudo-labels.
//! * [`camera`]: the pinhole model linking pitch/roll/FoV to the zenith
//!   vanishing point and horizon line.
//! * [`scene`]: a Manhattan-world generator used as ground truth.
//! * [`nn`]: named parameters and small layers.
//! * [`deform`]: single- and multi-scale deformable attention.
//! * [`model`]: the calibration transformer and its training loop.
//! * [`loss`] and [`eval`]: objectives and the evaluation protocol.
//! * [`verify`]: finite-difference gradient suites.

pub mod camera;
pub mod deform;
pub mod error;
pub mod eval;
pub mod line;
pub mod loss;
pub mod model;
pub mod nn;
pub mod scene;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
