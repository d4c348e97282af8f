//! The chapters of the guide in `book/`, compiled so that every Rust snippet
//! runs as a doctest.

#![doc = include_str!("../../../book/src/intro.md")]

#[doc = include_str!("../../../book/src/kronecker.md")]
pub mod kronecker {}

#[doc = include_str!("../../../book/src/compression.md")]
pub mod compression {}

#[doc = include_str!("../../../book/src/distillation.md")]
pub mod distillation {}

#[doc = include_str!("../../../book/src/checkpoints.md")]
pub mod checkpoints {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
