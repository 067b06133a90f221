//! Shadow removal with region-aware cross-attention.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: `f64` tensors, a reverse-mode [`tensor::Graph`] and the numeric kernels.
//! * [`optim`] provides Adam.
//! * [`attention`]: the region bias, positional embeddings, vanilla and
//!   region-aware attention, alignment blocks.
//! * [`model`]: dual encoder, decoder, compositing and the refinement U-Net.
//! * [`loss`]: reconstruction and spatial-consistency losses.
//! * [`data`]: PNG I/O, dataset layout, LAB conversion, Otsu and metrics.
//! * [`synth`], [`train`], [`eval`]: synthetic data, the training loop and evaluation reports.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use attention::{AttentionKind, KeyRegion, RegionBias};
pub use error::{Error, Result};
pub use mask::ShadowMask;
pub use params::{ParamId, ParamStore};
pub use tensor::{Graph, Tensor, Var};
