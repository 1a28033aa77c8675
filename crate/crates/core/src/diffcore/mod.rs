//! Differentiable building blocks with explicit backward passes.

pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod params;
pub mod pool;
pub mod resize;
pub mod tape;

pub use attention::{reduced_channels, AttentionVars};
pub use conv::{cdc_conv2d, conv2d, conv2d_backward, partial_conv2d, ConvGeom, PartialConvOutput};
pub use gradcheck::{grad_check, GradCheckConfig, GradReport};
pub use params::{Bound, Param, ParamStore};
pub use pool::{mask_max_pool2x2, masked_gap, max_pool2x2};
pub use resize::bilinear_resize;
pub use tape::{BackwardCtx, BackwardFn, Gradients, Tape, Var};
