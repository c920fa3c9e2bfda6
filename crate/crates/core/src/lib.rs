//! Patch-based forecasting with pattern-specific experts.
//!
//! Each channel of a lookback window is cut into overlapping patches and
//! embedded as tokens. A time-domain encoder (self-attention) and a
//! frequency-domain encoder (Fourier mixing) process the tokens; a pattern
//! identifier softly clusters the encoded tokens onto learned subspaces; the
//! resulting affinities route every token to a few small expert networks.
//! The two branches are merged and projected to the forecast horizon.
//!
//! All layers carry hand-written backward passes, checked against finite
//! differences in the test suite.

pub mod checkpoint;
pub mod data;
pub mod drift;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fft;
pub mod model;
pub mod mope;
pub mod nn;
pub mod patching;
pub mod pattern;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, RouterKind};
pub use train::{train, TrainConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/drift.md")]
    mod drift {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
