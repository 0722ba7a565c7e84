//! Data-free knowledge distillation toolkit for vision transformers.
//!
//! Desk-scale, fully self-contained: a dense f64 tensor engine with reverse-
//! mode autodiff, ViT classifiers exposing attention maps, attention-probe
//! machinery, a conditional GAN with an attention-consistency objective,
//! classification and detection distillation losses, FID/accuracy/mAP
//! metrics, procedural datasets, and bit-exact persistence.

pub mod error;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
pub use weights::ModelWeights;
