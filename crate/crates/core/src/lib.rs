//! Unsupervised color adaptation for aerial image segmentation.
//!
//! A [`colormap::ColorMap`] learns, adversarially against a PatchGAN
//! discriminator, a scale and shift for every color of the source imagery so
//! that recolored source tiles look like the target domain. A segmenter
//! trained on the source is then fine-tuned on the recolored tiles and used
//! to label the target. Classical histogram matching and gray world are
//! available as drop-in alternatives through [`adapt::Registry`].

pub mod adapt;
pub mod adversary;
pub mod baselines;
pub mod colormap;
pub mod dataset;
mod error;
pub mod experiment;
pub mod kv;
pub mod metrics;
pub mod pngio;
pub mod raster;
pub mod segmenter;
pub mod synth;
pub mod tiling;

pub use error::CoreError;

pub type Result<T> = std::result::Result<T, CoreError>;
