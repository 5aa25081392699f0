//! Compiles the guide's code blocks as doctests, since mdbook cannot link
//! against workspace crates.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/masks.md")]
pub mod masks {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/ensemble.md")]
pub mod ensemble {}

#[doc = include_str!("../../../book/src/cells.md")]
pub mod cells {}

#[doc = include_str!("../../../book/src/augmentation.md")]
pub mod augmentation {}

#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
