//! Contrast-agnostic deformable registration of 2D images.
//!
//! A Siamese encoder–decoder predicts a dense displacement field from a
//! moving/fixed pair. Training never sees more than one image contrast:
//! random 1×1 convolution stacks re-render each pair into arbitrary
//! contrasts, similarity is measured on the original images with LNCC, and
//! a latent penalty pulls the projected features of two renderings of the
//! same pair together.

pub mod augment;
pub mod cli;
pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod seed;
pub mod simnet;
pub mod synthdeform;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{CarError, Result};
pub use image::{Image2D, LabelMask};
pub use tensor::{Tape, Tensor, Var};
pub use warp::DeformationField;
