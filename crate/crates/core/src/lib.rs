//! Rate-distortion optimized vector-quantized image compression.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`graph`] provide a small dense-tensor type and a
//!   reverse-mode autodiff tape covering exactly the operations the
//!   models need.
//! * [`params`] and [`checkpoint`] handle named parameter sets and their
//!   on-disk format.
//! * [`tokenizer`], [`vq`], [`ordering`] and [`entropy_model`] implement
//!   the multi-scale analysis/synthesis transforms, codebook
//!   quantization, the dependency-aware token order, and the masked
//!   transformer that predicts token distributions.
//! * [`losses`] assembles the rate-distortion objective, [`coder`] turns
//!   model probabilities into an actual bitstream, and [`pipeline`] ties
//!   everything into train/compress/decompress entry points.
//! * [`corpus`] generates deterministic synthetic images and
//!   [`analysis`] offers small diagnostic utilities.

pub mod analysis;
pub mod checkpoint;
pub mod coder;
pub mod config;
pub mod corpus;
pub mod entropy_model;
pub mod error;
pub mod graph;
pub mod losses;
pub mod ordering;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;
pub mod vq;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::ParamSet;
pub use tensor::Tensor;
