// mdbook cannot test listings that depend on external crates, so every
// chapter is pulled in here as a doc comment and `cargo test --doc` runs the
// listings. One module per chapter keeps failure messages traceable.

#[doc = include_str!("src/intro.md")]
pub mod intro {}
#[doc = include_str!("src/kernel.md")]
pub mod kernel {}
#[doc = include_str!("src/solvers.md")]
pub mod solvers {}
#[doc = include_str!("src/estimator.md")]
pub mod estimator {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/exact.md")]
pub mod exact {}
#[doc = include_str!("src/bounds.md")]
pub mod bounds {}
#[doc = include_str!("src/harness.md")]
pub mod harness {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
