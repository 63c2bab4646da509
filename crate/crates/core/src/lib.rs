//! Transformers for directed acyclic graphs.
//!
//! Attention is restricted to each node's reachability receptive field
//! (ancestors and descendants within `k` hops) and node depth enters through
//! sinusoidal positional encodings. Both a dense masked backend and a sparse
//! message-passing backend are provided and agree to round-off.
//!
//! Module map:
//!
//! * [`dag`]: validated graphs, topological order, depth, reversal
//! * [`reach`]: receptive fields, dense masks, statistics, index files
//! * [`encoding`]: depth positional encodings
//! * [`attention`], [`kernels`], [`model`]: attention backends and transformer stacks
//! * [`autograd`]: gradient tape and finite-difference checking
//! * [`ppr`]: personalized PageRank support checks
//! * [`io`], [`generate`]: edge-list files, synthetic graph families, statistics
//! * [`checkpoint`]: parameter files
//! * [`trainer`]: structural regression tasks and an AdamW training loop
//! * [`bench`]: complexity bounds and scaling measurements

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod dag;
pub mod encoding;
pub mod error;
pub mod generate;
pub mod io;
pub mod kernels;
pub mod model;
pub mod ppr;
pub mod reach;
pub mod rng;
pub mod trainer;

pub use attention::{AttentionLayerParams, ReadoutMode, StackShape, TransformerBlockParams, TransformerStack};
pub use dag::{Dag, DepthVector};
pub use error::{Error, Result};
pub use model::{Backend, GraphContext, Task};
pub use reach::{Bound, ReachabilityIndex};

/// Worker count from `DAGKIT_THREADS`, or `default` when unset or invalid.
pub fn threads_from_env(default: usize) -> usize {
    std::env::var("DAGKIT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or(default)
}

/// Run `f` on a dedicated pool of `threads` workers; parallel code inside `f` uses it.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Number of hardware threads, falling back to one.
pub fn available_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
