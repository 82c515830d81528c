//! Layer-adjustable interaction encoding.
//!
//! A transformer encoder whose first `P` layers process each input segment
//! independently and whose remaining `L - P` layers attend across the whole
//! concatenated input. `P = 0` is an ordinary fully self-attentive encoder;
//! `P = L` encodes every segment on its own. Because the layer-`P` output of
//! a segment does not depend on the other segments, it can be cached and
//! reused whenever the same segment shows up again.
//!
//! Modules:
//!
//! - [`tensor`]: dense matrices, masked softmax, RMS norm.
//! - [`encoder`]: attention, encoder blocks, layer ranges.
//! - [`pipeline`]: task templates, tokenization, [`lait_encode`], classification.
//! - [`cache`]: byte-budgeted LRU store of segment representations.
//! - [`cost`]: analytic attention operation counts and dataset ratios.
//! - [`train`]: backprop, finite-difference checks, Adam, synthetic tasks.
//! - [`bench`]: Cartesian and replay workloads with timing.
//! - [`verify`]: the invariant suite behind `lait verify`.
//! - [`cli`]: the `lait` command line.

pub mod bench;
pub mod cache;
pub mod cli;
pub mod config;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod io;
pub mod mask;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod weights;

pub use cache::{cache_key, CacheEntry, CacheKey, RepCache};
pub use config::{ModelConfig, PosScheme};
pub use cost::{attention_ops, cached_dataset_cost, dataset_cost, ops_to_flops, CostReport, LengthRecord};
pub use encoder::{multi_head_attention, run_layers, OpCounter};
pub use error::{FormatError, LaitError, Result};
pub use mask::{build_block_mask, AttentionMask};
pub use pipeline::{
    apply_template, classify, lait_encode, lait_encode_masked, segment_lengths, tokenize, vanilla_encode, Encoding,
    SegmentedExample, TaskTemplate,
};
pub use tensor::{Matrix, Scalar};
pub use weights::{ClassifierHead, ModelWeights};
