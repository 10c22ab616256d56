//! Query-aware selective attention for bag-of-patches inputs.
//!
//! A bag holds N patch feature vectors (optionally with grid coordinates) and
//! one weak label. The pipeline partitions the bag into regions, summarizes
//! each region with element-wise min/max metadata, embeds the summaries and
//! the query patch with shared projection heads, scores regions per query,
//! and runs multi-head attention over the query plus the patches of its
//! top-k regions only. Refined patches are pooled with a sigmoid-gated
//! softmax and mapped to classification or discrete-time survival outputs.
//!
//! All core arithmetic is f64 with a pinned left-to-right accumulation
//! order, so results are bit-reproducible for a fixed seed regardless of
//! chunking or thread count (parallel loops only ever write disjoint rows).

pub mod analysis;
pub mod attention;
pub mod bagstore;
pub mod counters;
pub mod error;
pub mod exec;
pub mod head;
pub mod metadata;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
