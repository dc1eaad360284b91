//! Latent multi-view graph module for relation extraction.
//!
//! Token embeddings become nodes. Each view gets a directed adjacency from
//! pairwise KL divergences between per-node Gaussians, dense graph
//! convolutions pass messages along it, and a union-of-views top-k pooling
//! keeps the tokens that matter, regularized by a SoftDTW alignment between
//! the first and last graphs.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod dtwpool;
pub mod gaussian_graph;
pub mod graphconv;
pub mod model;

mod error;

pub use error::{Error, Result};

/// The guide's snippets, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/gaussian-edges.md")]
    mod gaussian_edges {}
    #[doc = include_str!("../../../book/src/convolution.md")]
    mod convolution {}
    #[doc = include_str!("../../../book/src/pooling.md")]
    mod pooling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
