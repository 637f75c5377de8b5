//! Network configuration, weights, persistence and the forward graph.

mod checkpoint;
mod config;
mod net;
mod ops;
mod state;

pub use checkpoint::{Checkpoint, Precision, FORMAT_VERSION};
pub use config::{ArchConfig, UnitDepth};
pub use net::{Heads, Net, Plan, Prefix, SmOutput, Step};
pub use ops::*;
pub use state::{ModelState, Normalization, TrainMeta};
