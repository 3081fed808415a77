//! Stage-wise residual 2D Gaussian splatting for image representation.
//!
//! An image is rebuilt as a sum of anisotropic 2D Gaussians. Reconstruction
//! runs in stages: each stage looks at the residual left by the previous
//! ones, spawns primitives only in patches that still miss a PSNR/SSIM
//! target, and adds them to the accumulated set. The final set can be
//! quantized and packed into a self-describing `.gsir` stream.

pub mod error;
pub mod gaussian;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod quant;
pub mod render;
pub mod rng;
pub mod stagewise;
pub mod synthetic;

pub use error::{Error, FormatError, Result};
pub use gaussian::{build_covariance, canonicalize_theta, merge_sets, Covariance2D, Gaussian2D, GaussianSet};
pub use image::{Grid, ImageBuffer};
pub use render::{render, render_additive_check, render_backward, GaussianGrads, RenderConfig};
