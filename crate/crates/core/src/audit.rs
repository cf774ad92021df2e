//! Sharded-versus-reference equivalence audit.
//!
//! Trains the toy transformer for a few AdamW steps twice: once on a plain
//! single-device graph and once sharded over a dp × mp mesh. Compares the
//! first-step loss and gradients and the final parameters tensor by tensor
//! using `‖sharded − reference‖∞ / ‖reference‖∞`.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::{CommReport, DeviceMesh, Partition, ShardedTensor};
use crate::model::{lm_loss, reference_loss, TransformerConfig};
use crate::params::ParamTree;
use crate::plan::{derive_plan, infer_roles, same_dim_baseline, ParamRole, ShardingPlan};
use crate::spmd::{
    adamw_step, dp_sync_grads, gather_params, gather_tree, shard_params, spmd_forward_backward, AdamW,
    Result, Sharded, SpmdError, TrainState,
};
use crate::tensor::{DType, Graph, Tensor};

/// Tolerance on relative deviation for a dtype.
pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-4,
        _ => 1e-10,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanChoice {
    /// Derived by the two rules.
    Rules,
    /// Every sharded kernel split along dimension 0.
    SameDim,
}

#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub model: TransformerConfig,
    pub n_hosts: usize,
    pub dp: usize,
    pub mp: usize,
    pub dtype: DType,
    pub steps: usize,
    pub global_batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub optimizer: AdamW,
    pub plan: PlanChoice,
    /// Explicit plan, used instead of deriving one.
    pub plan_override: Option<ShardingPlan>,
    pub role_overrides: IndexMap<String, ParamRole>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            n_hosts: 1,
            dp: 1,
            mp: 1,
            dtype: DType::F64,
            steps: 10,
            global_batch: 4,
            seq_len: 8,
            seed: 0,
            optimizer: AdamW {
                lr: 1e-3,
                weight_decay: 0.01,
                ..AdamW::default()
            },
            plan: PlanChoice::Rules,
            plan_override: None,
            role_overrides: IndexMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    /// `loss`, `grad/<param>` or `param/<param>`.
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub loss_reference: f64,
    pub loss_sharded: f64,
    pub deviations: Vec<Deviation>,
    pub tolerance: f64,
    pub comm: CommReport,
    pub plan: ShardingPlan,
}

impl AuditReport {
    pub fn worst(&self) -> &Deviation {
        self.deviations
            .iter()
            .max_by(|a, b| a.value.total_cmp(&b.value))
            .expect("at least the loss deviation")
    }

    fn worst_with_prefix(&self, prefix: &str) -> f64 {
        self.deviations
            .iter()
            .filter(|d| d.name.starts_with(prefix))
            .map(|d| d.value)
            .fold(0.0, f64::max)
    }

    pub fn max_loss_dev(&self) -> f64 {
        self.worst_with_prefix("loss")
    }

    pub fn max_grad_dev(&self) -> f64 {
        self.worst_with_prefix("grad/")
    }

    pub fn max_param_dev(&self) -> f64 {
        self.worst_with_prefix("param/")
    }

    pub fn passed(&self) -> bool {
        self.deviations.iter().all(|d| d.value <= self.tolerance)
    }
}

/// Token batch for one step: random ids, next-token labels, unit weights.
pub fn synthetic_batch(cfg: &AuditConfig, step: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c_0000 ^ step as u64);
    let (b, t) = (cfg.global_batch, cfg.seq_len);
    let stream: Vec<usize> = (0..b * (t + 1))
        .map(|_| rng.random_range(0..cfg.model.vocab_size))
        .collect();
    let mut ids = Vec::with_capacity(b * t);
    let mut labels = Vec::with_capacity(b * t);
    for r in 0..b {
        let row = &stream[r * (t + 1)..(r + 1) * (t + 1)];
        ids.extend_from_slice(&row[..t]);
        labels.extend_from_slice(&row[1..]);
    }
    Ok((
        Tensor::from_indices(&[b, t], &ids)?,
        Tensor::from_indices(&[b, t], &labels)?,
        Tensor::ones(&[b, t], cfg.dtype),
    ))
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Plan the audit will use for the sharded run.
pub fn audit_plan(cfg: &AuditConfig, params: &ParamTree) -> Result<ShardingPlan> {
    if let Some(p) = &cfg.plan_override {
        if p.n_shards != cfg.mp {
            return Err(SpmdError::Config(format!(
                "plan was derived for {} shards but --mp is {}",
                p.n_shards, cfg.mp
            )));
        }
        return Ok(p.clone());
    }
    let shapes = params.shapes();
    let roles = infer_roles(&shapes, &cfg.role_overrides)?;
    let (plan, _) = derive_plan(&roles, &shapes, cfg.mp)?;
    Ok(match cfg.plan {
        PlanChoice::Rules => plan,
        PlanChoice::SameDim => same_dim_baseline(&plan, &shapes),
    })
}

fn replicated_state(params: &ParamTree) -> Result<TrainState> {
    let plan = ShardingPlan {
        n_shards: 1,
        entries: params.names().map(|n| (n.to_string(), Partition::Replicated)).collect(),
    };
    shard_params(params, &plan, &DeviceMesh::single_host(1, 1)?, 0)
}

/// Single-device training on a plain graph. Returns (first loss, first
/// gradients, final parameters).
pub fn reference_run(cfg: &AuditConfig, params: &ParamTree) -> Result<(f64, ParamTree, ParamTree)> {
    let mut state = replicated_state(params)?;
    let mut first = None;
    for step in 0..cfg.steps.max(1) {
        let (ids, labels, weights) = synthetic_batch(cfg, step)?;
        let current = gather_params(&state)?;
        let mut g = Graph::new().checked(true);
        let (loss, leaves) = reference_loss(&mut g, &cfg.model, &current, &ids, &labels, &weights)?;
        let ids_nodes: Vec<_> = leaves.values().copied().collect();
        let grads = g.grad(loss, &ids_nodes)?;
        let grad_tree: ParamTree = leaves.keys().cloned().zip(grads).collect();
        if first.is_none() {
            first = Some((g.value(loss).item()?, grad_tree.clone()));
        }
        if step == cfg.steps {
            break;
        }
        let sharded: Sharded = grad_tree
            .iter()
            .map(|(n, t)| Ok((n.to_string(), ShardedTensor::shard(t, Partition::Replicated, 1)?)))
            .collect::<Result<_>>()?;
        state = adamw_step(&state, &sharded, &cfg.optimizer, true)?;
    }
    let (loss, grads) = first.expect("at least one step");
    Ok((loss, grads, gather_params(&state)?))
}

/// One optimizer step of the sharded program: every replica runs its slice of
/// the global batch, gradients are averaged over dp, AdamW updates in place.
pub fn sharded_step(
    cfg: &AuditConfig,
    state: &TrainState,
    mesh: &DeviceMesh,
    step: usize,
) -> Result<(f64, Sharded, TrainState)> {
    let (ids, labels, weights) = synthetic_batch(cfg, step)?;
    let per = cfg.global_batch / cfg.dp;
    let mut losses = 0.0;
    let mut replica_grads = Vec::with_capacity(cfg.dp);
    for r in 0..cfg.dp {
        let rows = |t: &Tensor| t.slice_axis(0, r * per, per);
        let (i, l, w) = (rows(&ids)?, rows(&labels)?, rows(&weights)?);
        let (loss, grads) =
            spmd_forward_backward(state, mesh, r, true, |ctx| lm_loss(ctx, &cfg.model, &i, &l, &w))?;
        losses += loss;
        replica_grads.push(grads);
    }
    let grads = dp_sync_grads(&replica_grads, mesh)?;
    let next = adamw_step(state, &grads, &cfg.optimizer, true)?;
    Ok((losses / cfg.dp as f64, grads, next))
}

pub fn run_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.model.validate()?;
    if !cfg.global_batch.is_multiple_of(cfg.dp) {
        return Err(SpmdError::Config(format!(
            "global batch {} is not divisible by dp {}",
            cfg.global_batch, cfg.dp
        )));
    }
    let devices = cfg.dp * cfg.mp;
    if cfg.n_hosts == 0 || !devices.is_multiple_of(cfg.n_hosts) {
        return Err(SpmdError::Config(format!(
            "{devices} devices cannot be spread evenly over {} hosts",
            cfg.n_hosts
        )));
    }
    let params = cfg.model.init(cfg.seed, cfg.dtype)?;
    let (ref_loss, ref_grads, ref_params) = reference_run(cfg, &params)?;

    let mesh = DeviceMesh::build(cfg.n_hosts, devices / cfg.n_hosts, cfg.dp, cfg.mp)?;
    let plan = audit_plan(cfg, &params)?;
    let mut state = shard_params(&params, &plan, &mesh, cfg.seed)?;
    let mut first: Option<(f64, Sharded)> = None;
    for step in 0..cfg.steps.max(1) {
        let (loss, grads, next) = sharded_step(cfg, &state, &mesh, step)?;
        if first.is_none() {
            first = Some((loss, grads));
        }
        if step < cfg.steps {
            state = next;
        }
    }
    let (loss, grads) = first.expect("at least one step");
    let grads = gather_tree(&grads)?;
    let final_params = gather_params(&state)?;

    let mut deviations = vec![Deviation {
        name: "loss".into(),
        value: rel(loss, ref_loss),
    }];
    for (name, g) in grads.iter() {
        deviations.push(Deviation {
            name: format!("grad/{name}"),
            value: g.rel_deviation(ref_grads.get(name).expect("same parameter set"))?,
        });
    }
    for (name, p) in final_params.iter() {
        deviations.push(Deviation {
            name: format!("param/{name}"),
            value: p.rel_deviation(ref_params.get(name).expect("same parameter set"))?,
        });
    }
    Ok(AuditReport {
        loss_reference: ref_loss,
        loss_sharded: loss,
        deviations,
        tolerance: tolerance(cfg.dtype),
        comm: mesh.report(),
        plan,
    })
}
