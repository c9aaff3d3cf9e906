//! Open-vocabulary semantic segmentation learned from class-agnostic
//! pseudo-masks and image-caption pairs.
//!
//! The crate is organized along the pipeline:
//!
//! | module | role |
//! |---|---|
//! | [`data`] | image-caption manifests, caption filtering/tokenization, augmentation, synthetic shapes |
//! | [`pseudomask`] | feature tokens, K-means, pseudo-mask generation, oracle scoring |
//! | [`segmodel`] | mask-query segmentation network, text encoder, projection heads, checkpoints |
//! | [`matching`] | optimal pseudo-mask to prediction assignment |
//! | [`losses`] | dice, focal, mask, contrastive and total objectives |
//! | [`train`] | the optimization loop |
//! | [`inference`] | open-vocabulary prediction and rendering |
//! | [`evalmod`] | confusion matrices and mIoU protocols |
//! | [`selftrain`] | pseudo-label generation and the supervised student |
//! | [`config`] | flat `key = value` configuration files |

pub mod config;
pub mod data;
pub mod error;
pub mod evalmod;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod pseudomask;
pub mod segmodel;
pub mod selftrain;
pub mod train;

pub use error::{Error, Result};
