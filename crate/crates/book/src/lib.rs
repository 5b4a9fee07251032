//! mdbook cannot test snippets that use outside crates, so every chapter is
//! included here as a module doc and `cargo test` runs its code blocks.

#[doc = include_str!("../../../book/src/index.md")]
pub mod index {}
#[doc = include_str!("../../../book/src/parts.md")]
pub mod parts {}
#[doc = include_str!("../../../book/src/extractor.md")]
pub mod extractor {}
#[doc = include_str!("../../../book/src/classifier.md")]
pub mod classifier {}
#[doc = include_str!("../../../book/src/memory.md")]
pub mod memory {}
#[doc = include_str!("../../../book/src/lifecycle.md")]
pub mod lifecycle {}
#[doc = include_str!("../../../book/src/simstream.md")]
pub mod simstream {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
