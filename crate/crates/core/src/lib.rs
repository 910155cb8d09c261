//! Text-driven layered editing of images and videos.
//!
//! A generator trained on the single input predicts an RGBA edit layer that
//! is composited over it; see the guide under `book/` for a walkthrough.

pub mod backend;
pub mod config;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod image;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod run;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};

/// The guide's chapters, so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/compositing.md")]
    mod compositing {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/video.md")]
    mod video {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
