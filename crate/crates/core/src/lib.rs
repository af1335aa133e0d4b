//! Multi-channel blind deconvolution with short filters.

pub mod error;
pub mod fourier;
pub mod model;
pub mod experiments;
pub mod identifiability;
pub mod instance_file;
pub mod solver;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/forward-model.md")]
    mod forward_model {}
    #[doc = include_str!("../../../book/src/identifiability.md")]
    mod identifiability {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
