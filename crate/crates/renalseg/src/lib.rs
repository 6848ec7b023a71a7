//! Building blocks for 3D kidney/tumor/cyst segmentation pipelines on CT volumes.
//!
//! The crate covers everything around the trained networks: NIfTI-1 volume I/O,
//! CT intensity normalization, resampling and cropping, hierarchical multi-label
//! encoding, sliding-window inference with pluggable window predictors,
//! cross-resolution ensembling, connected-component post-processing, the
//! deep-supervision dice loss with verified gradients, Dice / Surface Dice
//! evaluation, a synthetic phantom generator for end-to-end testing, and the
//! pipeline driver used by the CLI.

pub mod ensemble;
pub mod folds;
pub mod error;
pub mod infer;
pub mod labelspace;
pub mod loss;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod postproc;
pub mod volume;
pub mod xform;

pub use error::{Error, Result};
