//! The guide chapters from `book/`, included as rustdoc so that every
//! example in the book compiles and runs with the test suite. Nothing
//! in this module is called by the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/group-linear.md")]
pub mod group_linear {}

#[doc = include_str!("../../../book/src/dextra.md")]
pub mod dextra {}

#[doc = include_str!("../../../book/src/block.md")]
pub mod block {}

#[doc = include_str!("../../../book/src/scaling.md")]
pub mod scaling {}

#[doc = include_str!("../../../book/src/accounting.md")]
pub mod accounting {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
