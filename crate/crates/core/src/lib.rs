//! Linear-morphological hybrid network components.
//!
//! * [`morpho`]: max-plus dilation and erosion with learnable structuring
//!   elements, the dilation-based activation, equidistant up-sampling and
//!   closing.
//! * [`haar`]: the morphological Haar wavelet down-sampler and the gated
//!   RGB-D fusion block built on it.
//! * [`autograd`]: the dynamic reverse-mode differentiation graph every
//!   operator records onto.
//! * [`nn`], [`data`], [`train`]: a miniature dual-stream segmentation net,
//!   synthetic RGB-D scenes and file formats, and the training loop.

pub mod autograd;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod haar;
pub mod morpho;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
