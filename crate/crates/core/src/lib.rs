//! Temporal model merging: checkpoint storage, merge techniques, the
//! init/deploy protocol loop and a small synthetic continual-learning bench.
//!
//! ```
//! use chronomerge::{merge, Checkpoint, MergeConfig, Technique};
//!
//! let base = Checkpoint::new().with("w", vec![2], vec![0.0, 0.0]).unwrap();
//! let a = Checkpoint::new().with("w", vec![2], vec![1.0, 2.0]).unwrap();
//! let b = Checkpoint::new().with("w", vec![2], vec![3.0, 4.0]).unwrap();
//! let out = merge(&MergeConfig::new(Technique::Wa), &base, &[&a, &b]).unwrap();
//! assert_eq!(out.get("w").unwrap().data(), &[2.0, 3.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod merge;
pub mod metrics;
pub mod pipeline;
pub mod toybench;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointBuffer, TaskVector, Tensor,
};
pub use error::{Error, Result};
pub use merge::{merge, merge_fold, merge_with, MergeConfig, MergeContext, Technique, Weighting};
pub use metrics::{MetricsRow, MetricsTrajectory};
pub use pipeline::{DeployProtocol, InitProtocol, PipelineConfig, PipelineState};
pub use toybench::{generate_stream, BenchParams, ToyBench};
