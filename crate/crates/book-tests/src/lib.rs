//! Runs every listing in the guide as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/feedback.md")]
pub mod feedback {}

#[doc = include_str!("../../../book/src/factorization.md")]
pub mod factorization {}

#[doc = include_str!("../../../book/src/text.md")]
pub mod text {}

#[doc = include_str!("../../../book/src/audio.md")]
pub mod audio {}

#[doc = include_str!("../../../book/src/neural.md")]
pub mod neural {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
