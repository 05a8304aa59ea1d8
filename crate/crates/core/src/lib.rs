//! Training-free referring segmentation from the attention and features of an
//! instruction-based image-editing diffusion transformer.
//!
//! The model side is out of scope: an adapter dumps, for one denoising step,
//! each block's image-to-prompt and image-to-image attention plus one feature
//! map into a [`tensor_io::DumpBundle`]. Everything downstream lives here:
//!
//! * [`attention`]: coarse and refined attention maps
//! * [`localization`]: proposal, prototypes and per-pixel classification
//! * [`separability`]: foreground/background Fisher-style separability
//! * [`metrics`]: IoU, oIoU and mIoU
//! * [`synth`]: planted bundles with known ground truth
//! * [`harness`]: evaluation runs, sweeps and reports

pub mod attention;
pub mod config;
pub mod error;
pub mod grid;
pub mod harness;
pub mod localization;
pub mod metrics;
pub mod par;
pub mod separability;
pub mod synth;
pub mod tensor_io;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use grid::{Grid, Mask, Matrix};
