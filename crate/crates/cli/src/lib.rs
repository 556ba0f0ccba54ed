//! Command line interface and HTTP render service for voxstyle models.

pub mod cli;
pub mod model;
pub mod server;

pub use cli::run;
