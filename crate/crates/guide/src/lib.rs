//! Compiles every code block in the mdbook guide as a doctest, so the
//! book cannot drift from the crates it documents. One module per
//! chapter keeps doctest failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}

#[doc = include_str!("../../../book/src/windows.md")]
pub mod windows {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/tree-model.md")]
pub mod tree_model {}

#[doc = include_str!("../../../book/src/seq2point.md")]
pub mod seq2point {}

#[doc = include_str!("../../../book/src/broker.md")]
pub mod broker {}

#[doc = include_str!("../../../book/src/services.md")]
pub mod services {}

#[doc = include_str!("../../../book/src/benchmarking.md")]
pub mod benchmarking {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
