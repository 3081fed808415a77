//! Library side of the `gsir` command-line tool.

pub mod bench;
pub mod decode;
pub mod encode;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod train;

pub use error::{CliError, CliResult};
