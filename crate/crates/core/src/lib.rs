pub mod adapter;
pub mod checkpoint;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod objectives;
pub mod prompt_memory;
pub mod stream_bench;

pub use error::{PaintError, Result};
