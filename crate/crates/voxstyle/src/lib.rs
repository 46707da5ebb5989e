//! Stylize voxel radiance fields by gradient optimization, with perceptual
//! controls over color, pattern scale, spatial extent, and depth.
//!
//! The pipeline: reconstruct a photo-realistic [`field::VoxelField`] from
//! posed views, then optimize its colors so renders match a style image
//! under a nearest-neighbor feature-matching loss, routed through cached
//! image-space gradients. Controls select what the optimization may change:
//!
//! - color: style loss on luminance only, leaving chrominance near the
//!   photo-realistic renders ([`color`], [`losses`]);
//! - scale: per-feature-block weights and style resize factors steer the
//!   pattern size ([`losses::StyleSpec`]);
//! - spatial: binary masks gate the cached gradients so only chosen regions
//!   restyle ([`gradrouter`]);
//! - depth: a differentiable depth estimator keeps perceived depth close to
//!   the photo-realistic renders ([`depthnet`]).
//!
//! [`eval`] scores results with ContentDist, StyleFID, and their product
//! form, plus a masked variant. [`dataio`] persists scenes, checkpoints,
//! and metric reports; the `voxstyle` binary ties it together.

pub mod color;
pub mod convnet;
pub mod dataio;
pub mod depthnet;
pub mod error;
pub mod eval;
pub mod features;
pub mod field;
pub mod gradrouter;
pub mod image;
pub mod losses;
pub mod stylize;

pub mod cli;

pub(crate) mod optim;

pub use error::{Error, Result};

// Every fenced Rust block in the guide compiles and runs as a doc-test, so
// the book cannot drift from the library it documents.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/gradient-routing.md")]
    mod gradient_routing {}
    #[doc = include_str!("../../../book/src/stylization.md")]
    mod stylization {}
    #[doc = include_str!("../../../book/src/color.md")]
    mod color {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
