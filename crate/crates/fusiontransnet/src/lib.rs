//! Multimodal origin-destination (OD) flow forecasting.
//!
//! The pipeline runs in three phases. Per transportation mode, a
//! spatiotemporal encoder combines graph convolutions over two adjacency
//! channels (the observed flow graph and a learned adaptive graph) with
//! temporal attention over the input window. Cross-modal fusion then mixes
//! information globally (city-wide attention across modes) and locally (at
//! spatial units served by several modes), and a gated interaction merges
//! the three views. A bilinear decoder maps the resulting node embeddings
//! to the next-step OD matrix, trained with a magnitude-balanced loss over
//! all modes.
//!
//! Everything runs on the crate's own reverse-mode autodiff engine
//! ([`autodiff`]); there is no external ML framework. The [`data`] module
//! provides a deterministic synthetic city generator plus dataset I/O, and
//! [`train`] the AdamW loop, metrics, the historical-average baseline, and
//! embedding-space validation.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod decoder;
pub mod fusion;
pub mod graph;
pub mod intra;
pub mod model;
pub mod train;

pub use autodiff::Tensor;
pub use error::{FtnError, Result};
