//! Anatomically informed channel cross-attention for volumetric
//! classification, with CARE / Grad-CAM saliency, consistency fine-tuning,
//! complexity accounting and federated averaging.

pub mod analyze;
pub mod checksum;
pub mod data;
pub mod error;
pub mod fed;
pub mod net;
pub mod saliency;
pub mod tensor;
pub mod train;
pub mod xattn;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, Precision, Real, Tensor, Var};
