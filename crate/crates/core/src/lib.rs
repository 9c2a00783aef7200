//! Dense physical-property fields from posed RGB-D views and
//! language-embedded point clouds.
//!
//! The guide lives in `book/`; [`pipeline::Pipeline`] is the entry point.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod export;
pub mod fusion;
pub mod geometry;
pub mod integration;
pub mod materials;
pub mod metrics;
pub mod pipeline;
pub mod pointcloud;
pub mod provider;
pub mod regression;
pub mod scene;
pub mod spatial;
pub mod synthetic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/mass.md")]
    mod mass {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/providers.md")]
    mod providers {}
    #[doc = include_str!("../../../book/src/artifacts.md")]
    mod artifacts {}
}
