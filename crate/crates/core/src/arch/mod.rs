//! Network topology: configuration, graph construction and checkpoints.

pub mod builder;
pub mod checkpoint;
pub mod config;
pub mod graph;

pub use builder::{build_combinet, GraphBuilder};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use config::{ArchConfig, AsppConfig, BlockCounts};
pub use graph::{ForwardCtx, ForwardOutput, Graph, Layer, Node, NodeId, Param, ParamId, ParamKind};
