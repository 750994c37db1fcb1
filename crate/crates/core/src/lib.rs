pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mtl;
pub mod numcore;
pub mod text;

pub use error::{MtlError, Result};
