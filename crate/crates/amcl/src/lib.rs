//! Adversarial masking contrastive learning for small-image biometric
//! verification.
//!
//! The crate trains a verification encoder in three stages:
//!
//! 1. A GAN learns the distribution of random block masks from a large
//!    sampled corpus ([`masking`], [`gan`]).
//! 2. A contrastive encoder is pretrained on two augmented views per image,
//!    one of them occluded by a generated mask. A set of generator latent
//!    vectors is optimized by gradient *ascent* to make the masked views as
//!    hard as possible while the encoder descends the contrastive loss
//!    ([`contrastive`], [`adversarial`]).
//! 3. The encoder plus a softmax head is fine-tuned on labels and scored
//!    with rank-1 accuracy, EER and ROC curves ([`evalkit`]).
//!
//! All numerics are plain `f64` on ndarray with hand-written backward
//! passes, so every gradient in the crate can be checked against central
//! finite differences and runs are bit-reproducible for a fixed seed.
//!
//! The [`pipeline`] module (and the `amcl` binary) chains the stages into a
//! resumable experiment with checkpoints, metric files and plots. See the
//! crate examples for one runnable entry point per stage.

pub mod adversarial;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod gan;
pub mod masking;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use error::{AmclError, Result};
