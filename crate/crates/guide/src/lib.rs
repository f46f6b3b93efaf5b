//! The book's chapters, one module each, so `cargo test` runs every snippet.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tables.md")]
pub mod tables {}
#[doc = include_str!("../../../book/src/engine.md")]
pub mod engine {}
#[doc = include_str!("../../../book/src/reliability.md")]
pub mod reliability {}
#[doc = include_str!("../../../book/src/transformers.md")]
pub mod transformers {}
#[doc = include_str!("../../../book/src/pipeline-config.md")]
pub mod pipeline_config {}
#[doc = include_str!("../../../book/src/mock-fleet.md")]
pub mod mock_fleet {}
#[doc = include_str!("../../../book/src/benchmarks.md")]
pub mod benchmarks {}
