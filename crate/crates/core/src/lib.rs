//! Lab-of-origin attribution for genetically engineered DNA.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithmic
//! piece of the pipeline: DNA records and synthetic corpora, a BPE tokenizer
//! with circular-shift augmentation, a small reverse-mode autodiff core, the
//! convolutional encoder with its two heads (softmax classifier and triplet
//! embedding network), hard negative mining, training loops, test-time
//! augmented ranking, Borda/Copeland rank aggregation and k-means clustering.
//!
//! File formats, the CLI and anything touching the filesystem live in the
//! `geat` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cluster;
pub mod corpus;
pub mod ensemble;
mod error;
pub mod mining;
pub mod model;
pub mod numeric;
pub mod rank;
pub mod seed;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
