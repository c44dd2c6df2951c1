//! Pipeline orchestration behind the `duocast` executable: configuration,
//! artifact layout, and the corpus, train, synthesize, script and eval commands.

pub mod config;
pub mod corpus_cmd;
pub mod error;
pub mod eval;
pub mod script_cmd;
pub mod store;
pub mod synthesize;
pub mod train;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
