//! Layered video decomposition into foreground omnimatte layers composited
//! over a factorized voxel radiance-field background.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`io`] reads and writes the on-disk dataset and its file formats.
//! * [`field`] is the vector-matrix factorized background radiance field.
//! * [`render`] generates camera rays and volume-renders the field.
//! * [`fgmodel`] is the convolutional foreground network.
//! * [`composite`] implements the over operator for colors and flows.
//! * [`losses`] holds every training objective and the mask bootstrap schedule.
//! * [`trainer`] runs joint optimization; [`retrain`] fits a clean background.
//! * [`synthgen`] produces analytic scenes with full ground truth.
//! * [`eval`] computes PSNR / SSIM and renders run outputs.

pub mod checkpoint;
pub mod composite;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fgmodel;
pub mod field;
pub mod geom;
pub mod io;
pub mod losses;
pub mod nn;
pub mod real;
pub mod render;
pub mod retrain;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use real::Real;
