// The book's listings are run as doc-tests: each chapter is pulled into a
// module's docs here, so `cargo test --doc -p taskfuse-guide` checks every
// snippet against the current API. One module per chapter keeps failures
// traceable to their chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/search-space.md")]
pub mod search_space {}
#[doc = include_str!("../../../book/src/implicit-search.md")]
pub mod implicit_search {}
#[doc = include_str!("../../../book/src/meta-init.md")]
pub mod meta_init {}
#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
