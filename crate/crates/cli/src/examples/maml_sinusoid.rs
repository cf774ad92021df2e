//! First-order MAML on sinusoid regression.
//!
//! Each task is `y = A·sin(x + φ)` with `K` support and `K` query points.
//! `loss_fn` adapts the network with one gradient step on the support set,
//! `θ' = θ − α·∇θ L_support(θ)`, treating the gradient as a constant, and
//! returns the query loss at `θ'`. `pred_fn` reports the query loss before
//! and after adaptation.

use anyhow::bail;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use shardwise::mesh::{DeviceMesh, Partition};
use shardwise::pipeline::{Batch, PipelineSpec, RunConfig};
use shardwise::plan::ShardingPlan;
use shardwise::spmd::{shard_params, Ctx, DistTensor, Result as SpmdResult};
use shardwise::{DType, ParamTree, Tensor};

use super::Example;

/// Points per support (and per query) set.
pub const K: usize = 10;
pub const HIDDEN: usize = 40;
/// Inner-loop step size.
pub const ALPHA: f64 = 0.01;

const DATA_SEED: u64 = 0x0051_11e5;
const LAYERS: [&str; 3] = ["mlp/fc1", "mlp/fc2", "mlp/fc3"];

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub amplitude: f64,
    pub phase: f64,
    /// Support points first, then query points.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Task {
    fn new(amplitude: f64, phase: f64, xs: Vec<f64>) -> Self {
        let ys = xs.iter().map(|x| amplitude * (x + phase).sin()).collect();
        Self {
            amplitude,
            phase,
            xs,
            ys,
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let amplitude = rng.random_range(0.1..5.0);
        let phase = rng.random_range(0.0..std::f64::consts::PI);
        let xs = (0..2 * K).map(|_| rng.random_range(-5.0..5.0)).collect();
        Self::new(amplitude, phase, xs)
    }
}

#[derive(Default)]
pub struct MamlSinusoid;

/// The six MLP parameters in layer order: kernel, bias per layer.
fn mlp_params(ctx: &mut Ctx) -> SpmdResult<Vec<DistTensor>> {
    let mut out = Vec::new();
    for l in LAYERS {
        out.push(ctx.param(&format!("{l}/kernel"))?);
        out.push(ctx.param(&format!("{l}/bias"))?);
    }
    Ok(out)
}

fn mlp(ctx: &mut Ctx, theta: &[DistTensor], x: &DistTensor) -> SpmdResult<DistTensor> {
    let mut h = x.clone();
    for (i, wb) in theta.chunks(2).enumerate() {
        h = ctx.linear(&h, &wb[0], Some(&wb[1]))?;
        if i + 1 < LAYERS.len() {
            h = ctx.relu(&h)?;
        }
    }
    Ok(h)
}

fn mse(ctx: &mut Ctx, theta: &[DistTensor], x: &DistTensor, y: &DistTensor) -> SpmdResult<DistTensor> {
    let pred = mlp(ctx, theta, x)?;
    let diff = ctx.sub(&pred, y)?;
    let sq = ctx.mul(&diff, &diff)?;
    ctx.mean(&sq)
}

/// One first-order adaptation step: `θ − α·g` with `g` held constant.
pub fn adapt(ctx: &mut Ctx, theta: &[DistTensor], loss: &DistTensor, alpha: f64) -> SpmdResult<Vec<DistTensor>> {
    let refs: Vec<&DistTensor> = theta.iter().collect();
    let grads = ctx.detached_grad(loss, &refs)?;
    theta
        .iter()
        .zip(&grads)
        .map(|(t, g)| {
            let step = ctx.scale(g, alpha)?;
            ctx.sub(t, &step)
        })
        .collect()
}

/// Support and query inputs of task `b`, each `[K, 1]`.
fn task_tensors(ctx: &mut Ctx, batch: &Batch, b: usize) -> SpmdResult<[DistTensor; 4]> {
    let mut out = Vec::with_capacity(4);
    for key in ["x_support", "y_support", "x_query", "y_query"] {
        let t = batch[key].slice_axis(0, b, 1)?.reshape(&[K, 1])?;
        out.push(ctx.input(&t)?);
    }
    Ok(out.try_into().expect("four tensors"))
}

fn collate(tasks: &[Task]) -> shardwise::pipeline::Result<Batch> {
    let b = tasks.len();
    let part = |v: &[f64], query: bool| if query { v[K..].to_vec() } else { v[..K].to_vec() };
    let stack = |f: &dyn Fn(&Task) -> Vec<f64>| -> shardwise::pipeline::Result<Tensor> {
        Ok(Tensor::from_vec(&[b, K, 1], tasks.iter().flat_map(f).collect())?)
    };
    Ok(Batch::from([
        ("x_support".to_string(), stack(&|t| part(&t.xs, false))?),
        ("y_support".to_string(), stack(&|t| part(&t.ys, false))?),
        ("x_query".to_string(), stack(&|t| part(&t.xs, true))?),
        ("y_query".to_string(), stack(&|t| part(&t.ys, true))?),
    ]))
}

impl MamlSinusoid {
    /// Adapts `θ = 1` under the inner loss `θ²` with `α = 0.1` through the
    /// same [`adapt`] used in training. Returns `(θ, grad, θ')`.
    pub fn quadratic_step(&self) -> anyhow::Result<(f64, f64, f64)> {
        let mut params = ParamTree::new();
        params.insert("theta", Tensor::from_vec(&[1], vec![1.0])?);
        let plan = ShardingPlan {
            n_shards: 1,
            entries: IndexMap::from([("theta".to_string(), Partition::Replicated)]),
        };
        let mesh = DeviceMesh::single_host(1, 1)?;
        let state = shard_params(&params, &plan, &mesh, 0)?;
        let mut ctx = Ctx::new(&mesh, 0, &state.params, DType::F64, true);
        let theta = ctx.param("theta")?;
        let sq = ctx.mul(&theta, &theta)?;
        let loss = ctx.sum(&sq)?;
        let grad = ctx.detached_grad(&loss, &[&theta])?;
        let adapted = adapt(&mut ctx, std::slice::from_ref(&theta), &loss, 0.1)?;
        Ok((
            ctx.value(&theta)?.item()?,
            ctx.value(&grad[0])?.item()?,
            ctx.value(&adapted[0])?.item()?,
        ))
    }
}

impl Example for MamlSinusoid {
    type Input = Task;
    /// Query loss before and after adaptation.
    type Output = (f64, f64);

    fn name(&self) -> &'static str {
        "maml-sinusoid"
    }

    fn defaults(&self) -> RunConfig {
        RunConfig {
            n_epochs: 1000,
            max_steps: Some(5000),
            per_device_batch_size: 10,
            eval_per_device_batch_size: 10,
            learning_rate: 1e-2,
            warmup_rate: 0.1,
            weight_decay: 0.0,
            dtype: DType::F32,
            save_argmax_ckpt_by_metrics: vec!["improved_fraction".into()],
            ..RunConfig::default()
        }
    }

    /// He-normal kernels, zero biases.
    fn init_params(&self, seed: u64, dtype: DType) -> anyhow::Result<ParamTree> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [(HIDDEN, 1), (HIDDEN, HIDDEN), (1, HIDDEN)];
        let mut tree = ParamTree::new();
        for (l, (out, inp)) in LAYERS.iter().zip(dims) {
            let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt())?;
            let w = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
            tree.insert(format!("{l}/kernel"), Tensor::new(vec![out, inp], w, dtype)?);
            tree.insert(format!("{l}/bias"), Tensor::zeros(&[out], dtype));
        }
        Ok(tree)
    }

    fn datasets(&self) -> (Vec<Task>, Vec<Task>) {
        let mut rng = ChaCha8Rng::seed_from_u64(DATA_SEED);
        let train = (0..4096).map(|_| Task::sample(&mut rng)).collect();
        let eval = (0..100).map(|_| Task::sample(&mut rng)).collect();
        (train, eval)
    }

    fn spec(&self) -> PipelineSpec<Task, (f64, f64)> {
        PipelineSpec::new(collate, |ctx, batch, _rng| {
            let n = batch["x_support"].shape()[0];
            let theta = mlp_params(ctx)?;
            let mut total: Option<DistTensor> = None;
            for b in 0..n {
                let [xs, ys, xq, yq] = task_tensors(ctx, batch, b)?;
                let support = mse(ctx, &theta, &xs, &ys)?;
                let adapted = adapt(ctx, &theta, &support, ALPHA)?;
                let query = mse(ctx, &adapted, &xq, &yq)?;
                total = Some(match total {
                    None => query,
                    Some(t) => ctx.add(&t, &query)?,
                });
            }
            ctx.scale(&total.expect("non-empty batch"), 1.0 / n as f64)
        })
        .with_predict(
            |session, batch, _rng| {
                let n = batch["x_support"].shape()[0];
                let (mut pre, mut post) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for b in 0..n {
                    let mut ctx = session.ctx();
                    let theta = mlp_params(&mut ctx)?;
                    let [xs, ys, xq, yq] = task_tensors(&mut ctx, batch, b)?;
                    let before = mse(&mut ctx, &theta, &xq, &yq)?;
                    let support = mse(&mut ctx, &theta, &xs, &ys)?;
                    let adapted = adapt(&mut ctx, &theta, &support, ALPHA)?;
                    let after = mse(&mut ctx, &adapted, &xq, &yq)?;
                    pre.push(ctx.value(&before)?.item()?);
                    post.push(ctx.value(&after)?.item()?);
                }
                Ok(Batch::from([
                    ("pre_loss".to_string(), Tensor::new(vec![n], pre, DType::F64)?),
                    ("post_loss".to_string(), Tensor::new(vec![n], post, DType::F64)?),
                ]))
            },
            |out| {
                let (pre, post) = (out["pre_loss"].data(), out["post_loss"].data());
                Ok(pre.iter().copied().zip(post.iter().copied()).collect())
            },
        )
        .with_metric(|_, preds: &[(f64, f64)]| {
            let n = preds.len().max(1) as f64;
            let improved = preds.iter().filter(|(a, b)| b < a).count();
            IndexMap::from([
                ("improved_fraction".to_string(), improved as f64 / n),
                ("pre_loss".to_string(), preds.iter().map(|p| p.0).sum::<f64>() / n),
                ("post_loss".to_string(), preds.iter().map(|p| p.1).sum::<f64>() / n),
            ])
        })
    }

    /// `amplitude phase`; support and query points lie on fixed grids.
    fn parse_input(&self, line: &str) -> anyhow::Result<Task> {
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| anyhow::anyhow!("expected `amplitude phase`, got {line:?}"))?;
        let [amplitude, phase] = nums[..] else {
            bail!("expected `amplitude phase`, got {line:?}");
        };
        let grid = |offset: f64| (0..K).map(move |i| -5.0 + offset + 10.0 * i as f64 / K as f64);
        let xs = grid(0.0).chain(grid(0.5)).collect();
        Ok(Task::new(amplitude, phase, xs))
    }

    fn render(&self, input: &Task, output: &(f64, f64)) -> String {
        format!(
            "amplitude={} phase={} pre_loss={} post_loss={}",
            input.amplitude, input.phase, output.0, output.1
        )
    }

    fn debug_trace(&self) -> anyhow::Result<Vec<String>> {
        let (theta, grad, adapted) = self.quadratic_step()?;
        Ok(vec![format!(
            "maml quadratic: theta={theta} alpha=0.1 inner_loss=theta^2 grad={grad} theta'={adapted}"
        )])
    }
}
