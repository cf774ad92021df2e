//! The training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::{
    batch_size, io_err, learning_rate, slice_rows, Batch, Deployer, Metrics, PipelineError, PipelineSpec,
    Predictor, Result, RngStreams, RunConfig, StepRng,
};
use crate::params::ParamTree;
use crate::plan::{ParamRole, ShardingPlan};
use crate::spmd::{
    accumulate, adamw_step, dp_sync_grads, gather_params, scale_grads, shard_params, spmd_forward_backward,
    AdamW, Ctx, Sharded, SpmdError, TrainState,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub eval_loss: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Optimizer steps in the whole schedule.
    pub total_steps: u64,
    /// `(step, loss)` for every step taken by this call.
    pub losses: Vec<(u64, f64)>,
    pub evals: Vec<EvalRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer<'a, E, O> {
    deployer: &'a Deployer,
    spec: PipelineSpec<E, O>,
    config: RunConfig,
    state: TrainState,
    rng: RngStreams,
    log: Vec<String>,
    collate_shapes: BTreeMap<usize, BTreeMap<String, Vec<usize>>>,
    best: BTreeMap<String, f64>,
}

impl<'a, E: Clone, O> Trainer<'a, E, O> {
    /// Shards freshly initialized `params` (cast to `config.dtype`) under the
    /// deployer's sharding rules.
    pub fn new(
        deployer: &'a Deployer,
        spec: PipelineSpec<E, O>,
        config: RunConfig,
        params: &ParamTree,
        overrides: &IndexMap<String, ParamRole>,
    ) -> Result<Self> {
        config.validate()?;
        if config.seed != deployer.seed() {
            return Err(PipelineError::Config(format!(
                "run seed {} differs from the deployer seed {}",
                config.seed,
                deployer.seed()
            )));
        }
        let dtype = config.dtype;
        let params = params.map(|_, t| if t.dtype().is_float() { t.with_dtype(dtype) } else { Ok(t.clone()) })?;
        let plan = deployer.get_sharding_rules(&params, overrides)?;
        let state = shard_params(&params, &plan, deployer.mesh(), config.seed)?;
        let rng = deployer.rng_streams();
        Ok(Self::assemble(deployer, spec, config, state, rng))
    }

    /// Continues from a checkpoint. Parameters, moments, step and RNG
    /// counters come from the checkpoint; the plan is re-derived for the
    /// deployer's mesh.
    pub fn from_checkpoint(
        deployer: &'a Deployer,
        spec: PipelineSpec<E, O>,
        config: RunConfig,
        ckpt: Checkpoint,
        overrides: &IndexMap<String, ParamRole>,
    ) -> Result<Self> {
        config.validate()?;
        if ckpt.rng.seed != config.seed {
            log::warn!(
                "checkpoint seed {} overrides configured seed {}",
                ckpt.rng.seed,
                config.seed
            );
        }
        let plan = deployer.get_sharding_rules(&ckpt.params, overrides)?;
        let rng = ckpt.rng.clone();
        let state = ckpt.into_state(&plan, deployer.mesh())?;
        Ok(Self::assemble(deployer, spec, config, state, rng))
    }

    fn assemble(
        deployer: &'a Deployer,
        spec: PipelineSpec<E, O>,
        config: RunConfig,
        state: TrainState,
        rng: RngStreams,
    ) -> Self {
        Self {
            deployer,
            spec,
            config,
            state,
            rng,
            log: Vec::new(),
            collate_shapes: BTreeMap::new(),
            best: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn plan(&self) -> ShardingPlan {
        self.state.plan()
    }

    pub fn params(&self) -> Result<ParamTree> {
        Ok(gather_params(&self.state)?)
    }

    pub fn rng(&self) -> &RngStreams {
        &self.rng
    }

    pub fn spec(&self) -> &PipelineSpec<E, O> {
        &self.spec
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Run-log lines written so far by this trainer.
    pub fn log_lines(&self) -> &[String] {
        &self.log
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_state(&self.state, &self.rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint()?)
    }

    /// Predictions from the current parameters, in input order.
    pub fn predict(&mut self, examples: &[E], per_device_batch_size: usize) -> Result<Vec<O>> {
        Predictor::new(self.deployer, &self.spec)
            .checked(self.config.checked)
            .predict(&self.state, examples, per_device_batch_size, &mut self.rng)
    }

    fn emit(&mut self, line: String) -> Result<()> {
        log::info!("{line}");
        if let Some(dir) = self.deployer.workdir() {
            let path = dir.join("run.log");
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            writeln!(f, "{line}").map_err(io_err(&path))?;
        }
        self.log.push(line);
        Ok(())
    }

    fn collate(&mut self, examples: &[E]) -> Result<Batch> {
        let batch = (self.spec.collate_fn)(examples)?;
        let n = examples.len();
        if batch_size(&batch)? != n {
            return Err(PipelineError::Config(format!(
                "collate_fn returned {} rows for {n} examples",
                batch_size(&batch)?
            )));
        }
        let shapes: BTreeMap<String, Vec<usize>> =
            batch.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
        match self.collate_shapes.get(&n) {
            None => {
                self.collate_shapes.insert(n, shapes);
            }
            Some(seen) if *seen != shapes => {
                let key = seen
                    .keys()
                    .chain(shapes.keys())
                    .find(|k| seen.get(*k) != shapes.get(*k))
                    .expect("maps differ")
                    .clone();
                return Err(PipelineError::CollateShapeDrift {
                    batch_size: n,
                    expected: seen.get(&key).cloned(),
                    actual: shapes.get(&key).cloned(),
                    key,
                });
            }
            Some(_) => {}
        }
        Ok(batch)
    }

    /// Trains until the schedule (or `stop_after_steps`) is exhausted,
    /// evaluating and checkpointing at the end of every epoch.
    pub fn fit(&mut self, train: &[E], eval: Option<&[E]>) -> Result<RunSummary> {
        let dp = self.deployer.dp_size();
        let per = self.config.per_device_batch_size;
        let acc = self.config.accumulate_grad_batches;
        let global = per * dp;
        let steps_per_epoch = (train.len() / global / acc) as u64;
        if steps_per_epoch == 0 {
            return Err(PipelineError::Config(format!(
                "{} training examples do not fill one optimizer step of {} examples \
                 ({per} per device x dp={dp} x accumulate={acc})",
                train.len(),
                global * acc
            )));
        }
        let mut total = steps_per_epoch * self.config.n_epochs as u64;
        if let Some(m) = self.config.max_steps {
            total = total.min(m);
        }
        let stop = self.config.stop_after_steps.map_or(total, |s| s.min(total));
        let mut summary = RunSummary {
            total_steps: total,
            losses: Vec::new(),
            evals: Vec::new(),
            checkpoints: Vec::new(),
        };
        let mut order: Option<(u64, Vec<usize>)> = None;
        while self.state.step < stop {
            let step = self.state.step;
            let epoch = step / steps_per_epoch;
            let within = (step % steps_per_epoch) as usize;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, self.rng.epoch_permutation(train.len(), epoch)));
            }
            let idx = order.as_ref().map(|(_, o)| o.clone()).expect("set above");
            let lr = learning_rate(self.config.learning_rate, self.config.warmup_rate, total, step);

            let mut replica_grads: Vec<Option<Sharded>> = vec![None; dp];
            let mut loss_sum = 0.0;
            for a in 0..acc {
                let mb = within * acc + a;
                let examples: Vec<E> = idx[mb * global..(mb + 1) * global]
                    .iter()
                    .map(|&i| train[i].clone())
                    .collect();
                let batch = self.collate(&examples)?;
                let step_rng = self.rng.next(RngStreams::TRAIN);
                for (r, slot) in replica_grads.iter_mut().enumerate() {
                    let sub = slice_rows(&batch, r * per, per)?;
                    let (loss, grads) = self.loss_and_grad(r, &sub, &step_rng, step)?;
                    loss_sum += loss;
                    match slot {
                        None => *slot = Some(grads),
                        Some(g) => accumulate(g, &grads)?,
                    }
                }
            }
            let replica_grads: Vec<Sharded> = replica_grads.into_iter().map(|g| g.expect("acc >= 1")).collect();
            let synced = dp_sync_grads(&replica_grads, self.deployer.mesh())?;
            let grads = if acc > 1 { scale_grads(&synced, 1.0 / acc as f64)? } else { synced };
            let opt = AdamW {
                lr,
                weight_decay: self.config.weight_decay,
                ..AdamW::default()
            };
            self.state = adamw_step(&self.state, &grads, &opt, self.config.checked)?;
            let loss = loss_sum / (acc * dp) as f64;
            summary.losses.push((step, loss));
            self.emit(format!("step={} loss={loss} lr={lr}", step + 1))?;

            let done = self.state.step;
            if done.is_multiple_of(steps_per_epoch) || done == total {
                let epoch = ((done - 1) / steps_per_epoch) as usize;
                self.end_of_epoch(epoch, eval, &mut summary)?;
            }
        }
        if let Some(dir) = self.deployer.workdir() {
            let path = dir.join("last.swck");
            self.save(&path)?;
            if !summary.checkpoints.contains(&path) {
                summary.checkpoints.push(path);
            }
            if let Some(last) = summary.evals.last() {
                let mut text = format!("step={}\neval_loss={}\n", last.step, last.eval_loss);
                for (k, v) in &last.metrics {
                    text.push_str(&format!("{k}={v}\n"));
                }
                let path = dir.join("metrics.txt");
                std::fs::write(&path, text).map_err(io_err(&path))?;
            }
        }
        Ok(summary)
    }

    fn loss_and_grad(&self, r: usize, batch: &Batch, rng: &StepRng, step: u64) -> Result<(f64, Sharded)> {
        let loss_fn = &self.spec.loss_fn;
        let result = spmd_forward_backward(&self.state, self.deployer.mesh(), r, self.config.checked, |ctx| {
            loss_fn(ctx, batch, rng)
        });
        let (loss, grads) = match result {
            Err(SpmdError::NonFinite(what)) if what == "loss" => {
                return Err(PipelineError::NonFiniteLoss { step, loss: f64::NAN })
            }
            other => other?,
        };
        if !loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss { step, loss });
        }
        Ok((loss, grads))
    }

    /// Mean loss over `examples`, weighted by the rows each replica saw.
    /// The final partial batch is split without padding.
    pub fn eval_loss(&mut self, examples: &[E]) -> Result<f64> {
        let dp = self.deployer.dp_size();
        let per = self.config.eval_per_device_batch_size;
        let dtype = self.state.dtype();
        let (mut weighted, mut rows) = (0.0, 0usize);
        for chunk in examples.chunks(per * dp) {
            let batch = (self.spec.collate_fn)(chunk)?;
            let step_rng = self.rng.next("eval");
            for r in 0..dp {
                let start = r * per;
                if start >= chunk.len() {
                    break;
                }
                let len = per.min(chunk.len() - start);
                let sub = slice_rows(&batch, start, len)?;
                let mut ctx = Ctx::new(self.deployer.mesh(), r, &self.state.params, dtype, self.config.checked);
                let loss = (self.spec.loss_fn)(&mut ctx, &sub, &step_rng)?;
                weighted += ctx.value(&loss)?.item()? * len as f64;
                rows += len;
            }
        }
        if rows == 0 {
            return Err(PipelineError::Config("evaluation set is empty".into()));
        }
        Ok(weighted / rows as f64)
    }

    fn end_of_epoch(&mut self, epoch: usize, eval: Option<&[E]>, summary: &mut RunSummary) -> Result<()> {
        let Some(eval) = eval.filter(|e| !e.is_empty()) else {
            return self.save_epoch(epoch, summary);
        };
        let eval_loss = self.eval_loss(eval)?;
        let mut metrics = Metrics::new();
        if self.spec.pred_fn.is_some() && self.spec.metric_fn.is_some() {
            let preds = self.predict(eval, self.config.eval_per_device_batch_size)?;
            metrics = (self.spec.metric_fn.as_ref().expect("checked"))(eval, &preds);
        }
        let mut line = format!("epoch={epoch} eval_loss={eval_loss}");
        for (k, v) in &metrics {
            line.push_str(&format!(" {k}={v}"));
        }
        self.emit(line)?;
        let record = EvalRecord {
            epoch,
            step: self.state.step,
            eval_loss,
            metrics,
        };
        self.save_epoch(epoch, summary)?;
        self.save_best(&record, summary)?;
        summary.evals.push(record);
        Ok(())
    }

    fn save_epoch(&mut self, epoch: usize, summary: &mut RunSummary) -> Result<()> {
        if let Some(dir) = self.deployer.workdir() {
            let path = dir.join(format!("epoch_{epoch}.swck"));
            self.save(&path)?;
            summary.checkpoints.push(path);
        }
        Ok(())
    }

    fn save_best(&mut self, record: &EvalRecord, summary: &mut RunSummary) -> Result<()> {
        let Some(dir) = self.deployer.workdir().map(Path::to_path_buf) else {
            return Ok(());
        };
        for name in self.config.save_argmax_ckpt_by_metrics.clone() {
            let value = if name == "eval_loss" {
                Some(record.eval_loss)
            } else {
                record.metrics.get(&name).copied()
            };
            let Some(value) = value else {
                log::warn!("metric `{name}` was not produced; no best checkpoint saved for it");
                continue;
            };
            let lower = self.config.lower_is_better.contains(&name);
            let better = match self.best.get(&name) {
                None => true,
                Some(&b) if lower => value < b,
                Some(&b) => value > b,
            };
            if better {
                self.best.insert(name.clone(), value);
                let path = dir.join(format!("best_{name}.swck"));
                self.save(&path)?;
                if !summary.checkpoints.contains(&path) {
                    summary.checkpoints.push(path);
                }
            }
        }
        Ok(())
    }
}
