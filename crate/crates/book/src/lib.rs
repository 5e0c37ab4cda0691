//! Guide chapters compiled as doc-tests, so the snippets in `book/` keep
//! building against the current API.

#[doc = include_str!("../../../book/src/index.md")]
pub mod index {}
#[doc = include_str!("../../../book/src/instances.md")]
pub mod instances {}
#[doc = include_str!("../../../book/src/inner_loop.md")]
pub mod inner_loop {}
#[doc = include_str!("../../../book/src/inference.md")]
pub mod inference {}
#[doc = include_str!("../../../book/src/policy.md")]
pub mod policy {}
#[doc = include_str!("../../../book/src/consensus.md")]
pub mod consensus {}
#[doc = include_str!("../../../book/src/runs.md")]
pub mod runs {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
