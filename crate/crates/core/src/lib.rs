//! Diffeomorphic deformable registration with stationary velocity fields and
//! uncertainty-aware test-time adaptation.
//!
//! Pipeline: a small convolutional predictor maps a fixed/moving image pair to
//! a stationary velocity field, scaling and squaring turns it into a
//! displacement, and the moving image is warped into the fixed frame. At test
//! time, Monte Carlo dropout gives a per-voxel variance map whose inverse
//! weights the image term while the predictor is fine-tuned on the pair.
//! Negating the velocity field yields the inverse transform.

pub mod diffeo;
pub mod engine;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod objective;
pub mod phantom;
pub mod predictor;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
