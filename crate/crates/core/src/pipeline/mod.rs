//! Collate/loss/predict pipelines.
//!
//! A user supplies three functions in a [`PipelineSpec`]: `collate_fn` turns
//! raw examples into named tensors, `loss_fn` turns those tensors into a
//! scalar loss, and `pred_fn` turns them into named outputs. [`Deployer`],
//! [`Trainer`] and [`Predictor`] handle everything else: the mesh, sharding
//! plans, batching, gradient accumulation, data-parallel synchronization,
//! evaluation, checkpoints, RNG streams and logging.

mod checkpoint;
mod deployer;
mod predictor;
mod rng;
mod trainer;

use std::collections::BTreeMap;
use std::path::PathBuf;

use indexmap::IndexMap;
use thiserror::Error;

use crate::mesh::MeshError;
use crate::plan::PlanError;
use crate::spmd::{Ctx, DistTensor, SpmdError};
use crate::tensor::{DType, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use deployer::{Deployer, MeshConfig};
pub use predictor::{Predictor, Session};
pub use rng::{RngStreams, StepRng};
pub use trainer::{EvalRecord, RunSummary, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Spmd(#[from] SpmdError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint at byte offset {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },
    #[error(
        "collate output drifted for batch size {batch_size}: `{key}` had shape \
         {expected:?}, now {actual:?}"
    )]
    CollateShapeDrift {
        batch_size: usize,
        key: String,
        expected: Option<Vec<usize>>,
        actual: Option<Vec<usize>>,
    },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("pred_fn output `{key}` has leading dimension {got}, expected batch size {expected}")]
    PredictBatchMismatch { key: String, expected: usize, got: usize },
    #[error("{0}")]
    Config(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Named model inputs or outputs. Every tensor's leading axis is the batch.
pub type Batch = BTreeMap<String, Tensor>;

/// Name → score.
pub type Metrics = IndexMap<String, f64>;

pub type CollateFn<E> = Box<dyn Fn(&[E]) -> Result<Batch>>;
pub type LossFn = Box<dyn Fn(&mut Ctx, &Batch, &StepRng) -> Result<DistTensor, SpmdError>>;
pub type PredFn = Box<dyn Fn(&Session, &Batch, &StepRng) -> Result<Batch>>;
pub type OutputFn<O> = Box<dyn Fn(&Batch) -> Result<Vec<O>>>;
pub type MetricFn<E, O> = Box<dyn Fn(&[E], &[O]) -> Metrics>;

/// The user's side of a pipeline.
pub struct PipelineSpec<E, O = Batch> {
    pub collate_fn: CollateFn<E>,
    pub loss_fn: LossFn,
    pub pred_fn: Option<PredFn>,
    /// Turns a batch of outputs into one value per example.
    pub output_fn: Option<OutputFn<O>>,
    pub metric_fn: Option<MetricFn<E, O>>,
}

impl<E, O> PipelineSpec<E, O> {
    pub fn new(
        collate_fn: impl Fn(&[E]) -> Result<Batch> + 'static,
        loss_fn: impl Fn(&mut Ctx, &Batch, &StepRng) -> Result<DistTensor, SpmdError> + 'static,
    ) -> Self {
        Self {
            collate_fn: Box::new(collate_fn),
            loss_fn: Box::new(loss_fn),
            pred_fn: None,
            output_fn: None,
            metric_fn: None,
        }
    }

    pub fn with_predict(
        mut self,
        pred_fn: impl Fn(&Session, &Batch, &StepRng) -> Result<Batch> + 'static,
        output_fn: impl Fn(&Batch) -> Result<Vec<O>> + 'static,
    ) -> Self {
        self.pred_fn = Some(Box::new(pred_fn));
        self.output_fn = Some(Box::new(output_fn));
        self
    }

    pub fn with_metric(mut self, metric_fn: impl Fn(&[E], &[O]) -> Metrics + 'static) -> Self {
        self.metric_fn = Some(Box::new(metric_fn));
        self
    }
}

/// Splits a batch of outputs into one single-row batch per example.
pub fn split_rows(batch: &Batch) -> Result<Vec<Batch>> {
    let n = batch_size(batch)?;
    (0..n)
        .map(|i| {
            batch
                .iter()
                .map(|(k, v)| Ok((k.clone(), v.slice_axis(0, i, 1)?)))
                .collect()
        })
        .collect()
}

/// Leading dimension shared by every tensor of a batch.
pub fn batch_size(batch: &Batch) -> Result<usize> {
    let mut size = None;
    for (k, v) in batch {
        let n = *v
            .shape()
            .first()
            .ok_or_else(|| PipelineError::Config(format!("batch entry `{k}` is a scalar")))?;
        match size {
            None => size = Some(n),
            Some(s) if s != n => {
                return Err(PipelineError::Config(format!(
                    "batch entry `{k}` has {n} rows, others have {s}"
                )))
            }
            _ => {}
        }
    }
    size.ok_or_else(|| PipelineError::Config("empty batch".into()))
}

/// Rows `[start, start + len)` of every tensor.
pub fn slice_rows(batch: &Batch, start: usize, len: usize) -> Result<Batch> {
    batch
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.slice_axis(0, start, len)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_epochs: usize,
    /// Caps the total number of optimizer steps (and the LR schedule length).
    pub max_steps: Option<u64>,
    /// Stops after this many steps without shortening the schedule, so a
    /// resumed run continues exactly where an uninterrupted one would be.
    pub stop_after_steps: Option<u64>,
    /// Examples per data-parallel replica per micro-batch.
    pub per_device_batch_size: usize,
    pub eval_per_device_batch_size: usize,
    pub accumulate_grad_batches: usize,
    pub learning_rate: f64,
    /// Fraction of total steps spent warming up linearly from 0.
    pub warmup_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub workdir: Option<PathBuf>,
    /// Metrics whose best value gets its own checkpoint (higher is better).
    pub save_argmax_ckpt_by_metrics: Vec<String>,
    /// Metrics from the list above where lower is better.
    pub lower_is_better: Vec<String>,
    pub dtype: DType,
    /// Fail on non-finite values inside ops.
    pub checked: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_epochs: 1,
            max_steps: None,
            stop_after_steps: None,
            per_device_batch_size: 8,
            eval_per_device_batch_size: 8,
            accumulate_grad_batches: 1,
            learning_rate: 1e-3,
            warmup_rate: 0.1,
            weight_decay: 0.0,
            seed: 0,
            workdir: None,
            save_argmax_ckpt_by_metrics: Vec::new(),
            lower_is_better: Vec::new(),
            dtype: DType::F32,
            checked: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("per_device_batch_size", self.per_device_batch_size),
            ("eval_per_device_batch_size", self.eval_per_device_batch_size),
            ("accumulate_grad_batches", self.accumulate_grad_batches),
        ] {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_rate) {
            return Err(PipelineError::Config(format!(
                "warmup_rate must be in [0, 1], got {}",
                self.warmup_rate
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `round(warmup_rate · total)` steps,
/// then linear decay towards 0 at `total`. `step` is 0-based.
pub fn learning_rate(peak: f64, warmup_rate: f64, total: u64, step: u64) -> f64 {
    let warmup = (warmup_rate * total as f64).round() as u64;
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total > warmup {
        peak * total.saturating_sub(step) as f64 / (total - warmup) as f64
    } else {
        peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let lr = |s| learning_rate(1.0, 0.1, 100, s);
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(5), 0.5);
        assert_eq!(lr(10), 1.0);
        assert_eq!(lr(55), 0.5);
        assert!(lr(99) > 0.0);
        assert_eq!(learning_rate(2.0, 0.0, 10, 0), 2.0);
    }

    #[test]
    fn rows_split_and_slice() {
        let mut b = Batch::new();
        b.insert("x".into(), Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        assert_eq!(batch_size(&b).unwrap(), 3);
        let rows = split_rows(&b).unwrap();
        assert_eq!(rows[2]["x"].data(), &[5.0, 6.0]);
        assert_eq!(slice_rows(&b, 1, 2).unwrap()["x"].shape(), &[2, 2]);
    }
}
