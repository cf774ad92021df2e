//! Sharded execution on the simulated mesh: layout-aware op recording,
//! sharded AdamW state and data-parallel gradient synchronization.

mod collectives;
mod ctx;
mod state;

use thiserror::Error;

use crate::mesh::{DeviceMesh, MeshError, Partition};
use crate::plan::PlanError;
use crate::tensor::{DType, TensorError};

pub use ctx::{Ctx, DistTensor};
pub use state::{
    accumulate, adamw_step, dp_sync_grads, gather_params, gather_tree, partitions, predicted_device_elements,
    scale_grads, shard_params, AdamW, Sharded, TrainState,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpmdError {
    #[error("{op}: expected layout {expected}, got {actual}")]
    Layout {
        op: &'static str,
        expected: Partition,
        actual: Partition,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("loss must be a replicated scalar, got global shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

pub type Result<T, E = SpmdError> = std::result::Result<T, E>;

/// Runs `loss_fn` on data-parallel replica `dp_rank` and differentiates it.
/// Returns the loss value and gradients sharded like `state.params`.
pub fn spmd_forward_backward<F>(
    state: &TrainState,
    mesh: &DeviceMesh,
    dp_rank: usize,
    checked: bool,
    loss_fn: F,
) -> Result<(f64, Sharded)>
where
    F: FnOnce(&mut Ctx) -> Result<DistTensor>,
{
    let dtype: DType = state.dtype();
    let mut ctx = Ctx::new(mesh, dp_rank, &state.params, dtype, checked);
    let loss = loss_fn(&mut ctx)?;
    let (value, grads) = ctx.backward(&loss)?;
    if checked && !value.is_finite() {
        return Err(SpmdError::NonFinite("loss".into()));
    }
    Ok((value, grads))
}
