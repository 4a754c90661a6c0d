//! Capacity-constrained variational latent models for conditional sequence
//! data, with mutual-information meters and an MCD-DTW similarity metric.

mod binio;
pub mod capacity;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod mcd;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod run;
pub mod tasks;

pub use error::{Error, Result};

// The guide's snippets run as doc-tests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/toy-data.md")]
    mod toy_data {}
    #[doc = include_str!("../../../book/src/constrained-training.md")]
    mod constrained_training {}
    #[doc = include_str!("../../../book/src/capacity.md")]
    mod capacity {}
    #[doc = include_str!("../../../book/src/hierarchical.md")]
    mod hierarchical {}
    #[doc = include_str!("../../../book/src/mcd-dtw.md")]
    mod mcd_dtw {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
