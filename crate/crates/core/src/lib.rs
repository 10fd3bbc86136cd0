pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod probe;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};

/// The guide's chapters, compiled so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    struct Retrieval;
    #[doc = include_str!("../../../book/src/probing.md")]
    struct Probing;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
