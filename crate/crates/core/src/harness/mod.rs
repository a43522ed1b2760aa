//! Run plumbing: configuration, checkpoints, the training and evaluation
//! commands behind the `lac` binary, and their reports.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod report;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
