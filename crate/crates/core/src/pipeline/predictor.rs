//! Batched prediction over the mesh.

use super::{slice_rows, Batch, Deployer, PipelineError, PipelineSpec, Result, RngStreams};
use crate::mesh::DeviceMesh;
use crate::spmd::{Ctx, Sharded, TrainState};
use crate::tensor::{DType, Tensor};

/// What `pred_fn` sees for one data-parallel replica: a factory for fresh
/// contexts over the sharded parameters, so decoding loops can run several
/// forward passes.
pub struct Session<'a> {
    mesh: &'a DeviceMesh,
    dp_rank: usize,
    params: &'a Sharded,
    dtype: DType,
    checked: bool,
}

impl<'a> Session<'a> {
    pub fn new(mesh: &'a DeviceMesh, dp_rank: usize, params: &'a Sharded, dtype: DType, checked: bool) -> Self {
        Self {
            mesh,
            dp_rank,
            params,
            dtype,
            checked,
        }
    }

    pub fn ctx(&self) -> Ctx<'a> {
        Ctx::new(self.mesh, self.dp_rank, self.params, self.dtype, self.checked)
    }

    pub fn dp_rank(&self) -> usize {
        self.dp_rank
    }
}

pub struct Predictor<'a, E, O> {
    deployer: &'a Deployer,
    spec: &'a PipelineSpec<E, O>,
    checked: bool,
}

impl<'a, E: Clone, O> Predictor<'a, E, O> {
    pub fn new(deployer: &'a Deployer, spec: &'a PipelineSpec<E, O>) -> Self {
        Self {
            deployer,
            spec,
            checked: false,
        }
    }

    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    /// One output per example, in input order. Batches hold
    /// `per_device_batch_size` examples per replica; the last one is padded
    /// with copies of the final example and the padding is dropped again.
    pub fn predict(
        &self,
        state: &TrainState,
        examples: &[E],
        per_device_batch_size: usize,
        rng: &mut RngStreams,
    ) -> Result<Vec<O>> {
        let (Some(pred_fn), Some(output_fn)) = (&self.spec.pred_fn, &self.spec.output_fn) else {
            return Err(PipelineError::Config("pipeline has no pred_fn/output_fn".into()));
        };
        if per_device_batch_size == 0 {
            return Err(PipelineError::Config("per_device_batch_size must be at least 1".into()));
        }
        let mesh = self.deployer.mesh();
        let dp = mesh.dp_size();
        let global = per_device_batch_size * dp;
        let dtype = state.dtype();
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(global) {
            let mut padded = chunk.to_vec();
            padded.resize(global, chunk[chunk.len() - 1].clone());
            let batch = (self.spec.collate_fn)(&padded)?;
            let step_rng = rng.next(RngStreams::PREDICT);
            let mut per_replica = Vec::with_capacity(dp);
            for r in 0..dp {
                let sub = slice_rows(&batch, r * per_device_batch_size, per_device_batch_size)?;
                let session = Session::new(mesh, r, &state.params, dtype, self.checked);
                let pred = pred_fn(&session, &sub, &step_rng)?;
                for (key, t) in &pred {
                    let got = t.shape().first().copied().unwrap_or(0);
                    if got != per_device_batch_size {
                        return Err(PipelineError::PredictBatchMismatch {
                            key: key.clone(),
                            expected: per_device_batch_size,
                            got,
                        });
                    }
                }
                per_replica.push(pred);
            }
            let merged: Batch = per_replica[0]
                .keys()
                .map(|k| {
                    let parts: Vec<&Tensor> = per_replica
                        .iter()
                        .map(|p| {
                            p.get(k).ok_or_else(|| {
                                PipelineError::Config(format!("replicas disagree on output `{k}`"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    Ok((k.clone(), Tensor::concat(&parts, 0)?))
                })
                .collect::<Result<_>>()?;
            let values = output_fn(&merged)?;
            if values.len() != global {
                return Err(PipelineError::Config(format!(
                    "output_fn returned {} values for a batch of {global}",
                    values.len()
                )));
            }
            out.extend(values.into_iter().take(chunk.len()));
        }
        Ok(out)
    }
}
