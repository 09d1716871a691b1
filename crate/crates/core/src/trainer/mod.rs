//! Desk-scale featurizer, its training loop and 2D segmentation.

mod augment;
mod checkpoint;
mod model;
mod optim;
mod segment;
mod train;

pub use augment::*;
pub use checkpoint::*;
pub use model::*;
pub use optim::*;
pub use segment::*;
pub use train::*;

use crate::corpus::write_jsonl_string;
use crate::error::Result;
use std::path::Path;

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    crate::corpus::write_bytes(path, write_jsonl_string(trace).as_bytes())
}
