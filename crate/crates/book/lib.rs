//! The guide's chapters, compiled as doc tests so every listing keeps working.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/contexts.md")]
pub mod contexts {}
#[doc = include_str!("../../book/src/streaming.md")]
pub mod streaming {}
#[doc = include_str!("../../book/src/compute.md")]
pub mod compute {}
#[doc = include_str!("../../book/src/decoding.md")]
pub mod decoding {}
#[doc = include_str!("../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../README.md")]
pub mod readme {}
