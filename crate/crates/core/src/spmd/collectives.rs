//! Collectives as graph nodes.
//!
//! Each op takes one tensor per group member and produces their results
//! stacked along a new leading axis; member `i` reads row `i` back with
//! `select`. Backward passes follow per-device SPMD semantics: every device
//! differentiates its own copy of the loss, so a collective's backward only
//! moves gradient between devices where the forward moved data.
//!
//! | op              | forward           | backward          |
//! |-----------------|-------------------|-------------------|
//! | `AllReduce`     | sum over group    | identity          |
//! | `CopyToGroup`   | identity          | sum over group    |
//! | `Scatter(axis)` | keep own slice    | all-gather slices |
//! | `Gather(axis)`  | all-gather shards | keep own slice    |

use crate::mesh::{DeviceMesh, MeshError, Partition, ShardedTensor};
use crate::tensor::{CustomOp, Result, Tensor, TensorError};

fn mesh_err(op: &str) -> impl Fn(MeshError) -> TensorError + '_ {
    move |e| TensorError::Custom {
        op: op.to_string(),
        msg: e.to_string(),
    }
}

/// Rows of a stacked gradient, cast back to the dtype the forward produced.
fn rows(grad: &Tensor, n: usize, like: &Tensor) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|i| grad.select(i)?.with_dtype(like.dtype()))
        .collect()
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::stack(&refs)
}

#[derive(Debug)]
pub(crate) struct AllReduce {
    pub mesh: DeviceMesh,
    pub group: Vec<usize>,
}

impl CustomOp for AllReduce {
    fn name(&self) -> &str {
        "all_reduce"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let xs: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
        let out = self.mesh.all_reduce(&xs, &self.group).map_err(mesh_err("all_reduce"))?;
        stack(&out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        rows(grad, inputs.len(), inputs[0])
    }
}

#[derive(Debug)]
pub(crate) struct CopyToGroup {
    pub mesh: DeviceMesh,
    pub group: Vec<usize>,
}

impl CustomOp for CopyToGroup {
    fn name(&self) -> &str {
        "copy_to_group"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Tensor::stack(inputs)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let gs = rows(grad, inputs.len(), inputs[0])?;
        self.mesh
            .all_reduce(&gs, &self.group)
            .map_err(mesh_err("copy_to_group"))
    }
}

#[derive(Debug)]
pub(crate) struct Scatter {
    pub mesh: DeviceMesh,
    pub group: Vec<usize>,
    pub axis: usize,
}

impl CustomOp for Scatter {
    fn name(&self) -> &str {
        "scatter"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let n = inputs.len();
        let parts = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| Ok(x.split(self.axis, n)?.swap_remove(i)))
            .collect::<Result<Vec<_>>>()?;
        stack(&parts)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let gs = rows(grad, inputs.len(), inputs[0])?;
        let sharded = ShardedTensor::from_shards(Partition::Split(self.axis), gs)
            .map_err(mesh_err("scatter"))?;
        self.mesh
            .all_gather(&sharded, &self.group)
            .map_err(mesh_err("scatter"))
    }
}

#[derive(Debug)]
pub(crate) struct Gather {
    pub mesh: DeviceMesh,
    pub group: Vec<usize>,
    pub axis: usize,
}

impl CustomOp for Gather {
    fn name(&self) -> &str {
        "gather"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let shards: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
        let sharded = ShardedTensor::from_shards(Partition::Split(self.axis), shards)
            .map_err(mesh_err("gather"))?;
        let out = self
            .mesh
            .all_gather(&sharded, &self.group)
            .map_err(mesh_err("gather"))?;
        stack(&out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let gs = rows(grad, inputs.len(), inputs[0])?;
        let mut offset = 0;
        inputs
            .iter()
            .zip(gs)
            .map(|(x, g)| {
                let len = x.shape()[self.axis];
                let part = g.slice_axis(self.axis, offset, len)?;
                offset += len;
                Ok(part)
            })
            .collect()
    }
}
