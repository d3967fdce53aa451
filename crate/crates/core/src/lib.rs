//! Entropy-gated audio-visual fusion for captioning, built on a small
//! reverse-mode tensor core. See the `book/` directory for a guided tour.

pub mod augment;
pub mod bench;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod traineval;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/shuffling.md")]
    mod shuffling {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/bench.md")]
    mod bench {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
