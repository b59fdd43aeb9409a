//! Visual place recognition with reference-set finetuning.
//!
//! The pipeline: a frozen handcrafted backbone ([`embedding::extract_raw`])
//! feeds a small trainable projection head whose outputs are unit-norm
//! descriptors. Reference descriptors form a [`retrieval::DescriptorMap`];
//! queries are answered by exact L2 nearest-neighbor search and scored with
//! Recall@N against a metric ground-truth radius. [`rsf`] adapts a trained
//! head to a new environment using only that environment's reference images
//! and poses, with augmented copies of the references standing in for queries.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod color;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod protocol;
pub mod retrieval;
pub mod rsf;
pub mod seed;
pub mod synth;

pub use error::{Result, VprError};
