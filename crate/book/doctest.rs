// mdbook cannot run listings that depend on a workspace crate, so every
// chapter is included here as the docs of an empty module and `cargo test`
// runs its code blocks as doc-tests. One module per chapter keeps failures
// traceable to their chapter.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/masks.md")]
pub mod masks {}
#[doc = include_str!("src/fusion.md")]
pub mod fusion {}
#[doc = include_str!("src/heads.md")]
pub mod heads {}
#[doc = include_str!("src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/formats.md")]
pub mod formats {}
#[doc = include_str!("src/ablations.md")]
pub mod ablations {}
