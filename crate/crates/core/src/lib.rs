//! Fully convolutional segmentation networks with forward and backward skip
//! connections, trained by a small reverse-mode graph engine.
//!
//! Backward skips feed late features of a Slave network into early blocks of
//! a Master network, which keeps the combined graph acyclic.

pub mod arch;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use arch::{build, init_params, param_count, ArchConfig, SkipInit, Variant};
pub use data::{Dataset, RngStream};
pub use error::{Error, Result};
pub use graph::{Graph, GradGate, ParamStore, Role};
pub use metrics::{Confusion, MetricsReport};
pub use tensor::{LabelMap, Tensor4};
pub use train::{TrainConfig, TrainHistory};
