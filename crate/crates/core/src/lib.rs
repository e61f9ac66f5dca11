//! Instance segmentation by regressing the weights of a per-instance
//! coordinate perceptron.
//!
//! A centroid CNN marks instance centers on a coarse grid. For every detected
//! center a second CNN looks at the surrounding patch and emits a 257-element
//! vector, which a fixed, parameterless decoder turns into a 64×64 mask by
//! evaluating the perceptron it encodes at every pixel coordinate. Masks are
//! merged with non-maximum suppression.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature; file formats, the command-line tool and plotting live in the
//! companion `vec2instance` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
