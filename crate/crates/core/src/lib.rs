//! Text-guided JPEG deblocking at desk scale.
//!
//! The crate covers the full loop: a bit-exact JPEG degradation simulator to
//! manufacture training pairs at extreme quality factors, a small autodiff
//! stack with the layers the networks need, caption/image encoders feeding
//! global and local image-text fusion inside a U-Net generator, a contrastive
//! loss over a differentiable perceptual-quality space, adversarial training,
//! and the evaluation metrics (PSNR, perceptual distance, small-extractor
//! Fréchet distance).

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod image;
pub mod jpeg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use jpeg::{QualityFactor, Subsampling};
pub use tensor::{Scalar, Tensor};
