//! Guide chapters as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/records.md")]
pub mod records {}

#[doc = include_str!("../../../book/src/aleatoric.md")]
pub mod aleatoric {}

#[doc = include_str!("../../../book/src/epistemic.md")]
pub mod epistemic {}

#[doc = include_str!("../../../book/src/conformal.md")]
pub mod conformal {}

#[doc = include_str!("../../../book/src/selection.md")]
pub mod selection {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
