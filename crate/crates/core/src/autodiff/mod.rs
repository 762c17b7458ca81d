//! Reverse-mode automatic differentiation over dense tensors.

mod composite;
mod graph;
mod params;

pub use graph::{Graph, NodeId, OpKind, ALL_OPS};
pub use params::{ParamEntry, ParamNodes, ParamSet};
