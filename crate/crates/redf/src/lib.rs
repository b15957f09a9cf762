//! Files, checkpoints and the command line for `redf-core`.

pub mod checkpoint;
pub mod cli;
pub mod csv;
pub mod error;
pub mod meta;
pub mod report;

pub use error::RunError;
