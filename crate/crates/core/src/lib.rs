//! Inharmonious-region localization with a learned color mapping stage.
//!
//! The pipeline maps a composite image through a per-pixel affine color transform
//! predicted from a bilateral grid, then segments the edited region with a UNet.
//! Training adds two code-space losses on top of the segmentation loss: a hinge that
//! pushes foreground/background domain codes further apart after the mapping, and a
//! cosine term that keeps the direction of their difference.

pub mod colormap;
pub mod dataset;
pub mod diffcore;
pub mod domenc;
pub mod error;
pub mod harness;
pub mod localizer;
pub mod losses;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
