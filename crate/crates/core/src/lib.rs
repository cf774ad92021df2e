//! Automatic tensor parallelism for transformer parameter trees, executed on a
//! simulated device mesh with byte-accounted collectives, plus a
//! collate/loss/predict training pipeline built on top of it.

pub mod audit;
pub mod mesh;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod plan;
pub mod spmd;
pub mod tensor;

pub use mesh::{Collective, CommReport, DeviceMesh, MeshError, Partition, ShardedTensor};
pub use params::ParamTree;
pub use plan::{ParamRole, PlanError, ShardingPlan};
pub use tensor::{DType, Graph, NodeId, Tensor, TensorError};
