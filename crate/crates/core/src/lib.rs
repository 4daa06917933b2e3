pub mod adec;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod layers;
pub mod model;
pub mod params;
pub mod pmoe;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

// The guide's snippets run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/experts.md")]
    mod experts {}
    #[doc = include_str!("../../../book/src/event_matching.md")]
    mod event_matching {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
