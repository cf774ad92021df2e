//! Sharded training state, AdamW and data-parallel gradient averaging.
//!
//! Parameters and both AdamW moments are stored once per model-parallel rank;
//! data-parallel replicas hold identical copies, so the state keeps a single
//! copy and every replica reads from it.

use indexmap::IndexMap;

use super::{Result, SpmdError};
use crate::mesh::{DeviceMesh, Partition, ShardedTensor};
use crate::params::ParamTree;
use crate::plan::ShardingPlan;
use crate::tensor::{DType, Tensor};

/// Per-parameter tensors sharded like the parameters themselves.
pub type Sharded = IndexMap<String, ShardedTensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: Sharded,
    pub adam_m: Sharded,
    pub adam_v: Sharded,
    pub rng_seed: u64,
}

/// Splits every parameter per `plan` over the mesh's model-parallel axis and
/// zero-initializes both moments with matching partitions.
pub fn shard_params(params: &ParamTree, plan: &ShardingPlan, mesh: &DeviceMesh, rng_seed: u64) -> Result<TrainState> {
    if plan.n_shards != mesh.mp_size() {
        return Err(SpmdError::Config(format!(
            "plan has n_shards={} but the mesh has mp={}",
            plan.n_shards,
            mesh.mp_size()
        )));
    }
    let n = mesh.mp_size();
    let mut out = TrainState {
        step: 0,
        params: Sharded::new(),
        adam_m: Sharded::new(),
        adam_v: Sharded::new(),
        rng_seed,
    };
    for (name, value) in params.iter() {
        let part = plan
            .get(name)
            .ok_or_else(|| SpmdError::Config(format!("plan has no entry for `{name}`")))?;
        let zeros = Tensor::zeros(value.shape(), value.dtype());
        out.params.insert(name.to_string(), ShardedTensor::shard(value, part, n)?);
        out.adam_m.insert(name.to_string(), ShardedTensor::shard(&zeros, part, n)?);
        out.adam_v.insert(name.to_string(), ShardedTensor::shard(&zeros, part, n)?);
    }
    if let Some(extra) = plan.entries.keys().find(|k| !params.contains(k)) {
        return Err(SpmdError::Config(format!("plan entry `{extra}` names no parameter")));
    }
    Ok(out)
}

pub fn gather_tree(tensors: &Sharded) -> Result<ParamTree> {
    tensors
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.gather()?)))
        .collect()
}

/// Reassembles the global parameters.
pub fn gather_params(state: &TrainState) -> Result<ParamTree> {
    gather_tree(&state.params)
}

impl TrainState {
    pub fn plan(&self) -> ShardingPlan {
        ShardingPlan {
            n_shards: self.params.values().next().map_or(1, |p| p.shards().len()),
            entries: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.partition()))
                .collect(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.params
            .values()
            .next()
            .map_or(DType::F64, |p| p.shard_of(0).dtype())
    }

    /// Parameter plus optimizer-state elements held by model-parallel rank
    /// `mp_rank`, counted from the stored shards.
    pub fn device_elements(&self, mp_rank: usize) -> usize {
        [&self.params, &self.adam_m, &self.adam_v]
            .iter()
            .flat_map(|t| t.values())
            .map(|s| s.shard_of(mp_rank).numel())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

/// One AdamW update with bias correction, applied shard by shard:
/// `θ ← θ − lr·(m̂ / (√v̂ + eps) + wd·θ)`.
pub fn adamw_step(state: &TrainState, grads: &Sharded, opt: &AdamW, checked: bool) -> Result<TrainState> {
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - opt.beta1.powf(t);
    let bc2 = 1.0 - opt.beta2.powf(t);
    let mut next = TrainState {
        step: state.step + 1,
        params: Sharded::new(),
        adam_m: Sharded::new(),
        adam_v: Sharded::new(),
        rng_seed: state.rng_seed,
    };
    for (name, p) in &state.params {
        let g = grads
            .get(name)
            .ok_or_else(|| SpmdError::Config(format!("no gradient for `{name}`")))?;
        if g.partition() != p.partition() || g.shards().len() != p.shards().len() {
            return Err(SpmdError::Layout {
                op: "adamw_step",
                expected: p.partition(),
                actual: g.partition(),
            });
        }
        let (m, v) = (&state.adam_m[name], &state.adam_v[name]);
        let mut new_p = Vec::new();
        let mut new_m = Vec::new();
        let mut new_v = Vec::new();
        for i in 0..p.shards().len() {
            let (pi, gi, mi, vi) = (p.shard_of(i), g.shard_of(i), m.shard_of(i), v.shard_of(i));
            if pi.shape() != gi.shape() {
                return Err(SpmdError::Config(format!(
                    "gradient shard of `{name}` has shape {:?}, parameter shard {:?}",
                    gi.shape(),
                    pi.shape()
                )));
            }
            if checked && !gi.all_finite() {
                return Err(SpmdError::NonFinite(format!("gradient of `{name}`")));
            }
            let dtype = pi.dtype();
            let n = pi.numel();
            let (mut pd, mut md, mut vd) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for k in 0..n {
                let gk = gi.data()[k];
                let mk = dtype.round(opt.beta1 * mi.data()[k] + (1.0 - opt.beta1) * gk);
                let vk = dtype.round(opt.beta2 * vi.data()[k] + (1.0 - opt.beta2) * gk * gk);
                let m_hat = mk / bc1;
                let v_hat = vk / bc2;
                let theta = pi.data()[k];
                let update = m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * theta;
                pd.push(theta - opt.lr * update);
                md.push(mk);
                vd.push(vk);
            }
            new_p.push(Tensor::new(pi.shape().to_vec(), pd, dtype)?);
            new_m.push(Tensor::new(pi.shape().to_vec(), md, dtype)?);
            new_v.push(Tensor::new(pi.shape().to_vec(), vd, dtype)?);
        }
        let part = p.partition();
        next.params.insert(name.clone(), ShardedTensor::from_shards(part, new_p)?);
        next.adam_m.insert(name.clone(), ShardedTensor::from_shards(part, new_m)?);
        next.adam_v.insert(name.clone(), ShardedTensor::from_shards(part, new_v)?);
    }
    Ok(next)
}

/// Averages gradients over the data-parallel axis. `per_replica[d]` holds
/// replica `d`'s gradients; each model-parallel device all-reduces its own
/// shard with its peers in the other replicas, then divides by `dp`.
pub fn dp_sync_grads(per_replica: &[Sharded], mesh: &DeviceMesh) -> Result<Sharded> {
    let dp = mesh.dp_size();
    if per_replica.len() != dp {
        return Err(SpmdError::Config(format!(
            "expected gradients from {dp} replicas, got {}",
            per_replica.len()
        )));
    }
    if dp == 1 {
        return Ok(per_replica[0].clone());
    }
    let mut out = Sharded::new();
    for (name, first) in &per_replica[0] {
        let mut shards = Vec::with_capacity(first.shards().len());
        for m in 0..first.shards().len() {
            let inputs = per_replica
                .iter()
                .map(|r| {
                    r.get(name)
                        .map(|g| g.shard_of(m).clone())
                        .ok_or_else(|| SpmdError::Config(format!("replica is missing gradient `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let summed = mesh.all_reduce(&inputs, &mesh.dp_group(m))?;
            let mean = summed[0].map(|x| x / dp as f64);
            shards.push(mean);
        }
        out.insert(name.clone(), ShardedTensor::from_shards(first.partition(), shards)?);
    }
    Ok(out)
}

/// Adds `b` into `a` shard by shard.
pub fn accumulate(a: &mut Sharded, b: &Sharded) -> Result<()> {
    for (name, acc) in a.iter_mut() {
        let g = b
            .get(name)
            .ok_or_else(|| SpmdError::Config(format!("missing gradient `{name}`")))?;
        let sum = acc
            .shards()
            .iter()
            .zip(g.shards())
            .map(|(x, y)| crate::tensor::kernels::add(x, y))
            .collect::<Result<Vec<_>, _>>()?;
        *acc = ShardedTensor::from_shards(acc.partition(), sum)?;
    }
    Ok(())
}

/// Multiplies every shard by `c`.
pub fn scale_grads(g: &Sharded, c: f64) -> Result<Sharded> {
    g.iter()
        .map(|(k, v)| {
            let shards = v.shards().iter().map(|s| s.map(|x| x * c)).collect();
            Ok((k.clone(), ShardedTensor::from_shards(v.partition(), shards)?))
        })
        .collect()
}

/// Per-device element count predicted by the plan: every parameter and its
/// two moments contribute their full size if replicated, `1/mp` if split.
pub fn predicted_device_elements(plan: &ShardingPlan, shapes: &crate::plan::Shapes) -> usize {
    3 * plan.per_device_elements(shapes)
}

/// Partition of each gradient, for checking it matches its parameter.
pub fn partitions(t: &Sharded) -> IndexMap<String, Partition> {
    t.iter().map(|(k, v)| (k.clone(), v.partition())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("theta", Tensor::scalar(v, DType::F64).reshape(&[1]).unwrap());
        t
    }

    fn replicated_plan(names: &[&str]) -> ShardingPlan {
        ShardingPlan {
            n_shards: 1,
            entries: names.iter().map(|n| (n.to_string(), Partition::Replicated)).collect(),
        }
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let mesh = DeviceMesh::single_host(1, 1).unwrap();
        let state = shard_params(&one(1.0), &replicated_plan(&["theta"]), &mesh, 0).unwrap();
        let mut grads = Sharded::new();
        grads.insert(
            "theta".into(),
            ShardedTensor::shard(&one(1.0).get("theta").unwrap().clone(), Partition::Replicated, 1).unwrap(),
        );
        let next = adamw_step(&state, &grads, &AdamW::default().with_lr(0.1), true).unwrap();
        assert_eq!(next.step, 1);
        let m = next.adam_m["theta"].shard_of(0).data()[0];
        let v = next.adam_v["theta"].shard_of(0).data()[0];
        assert!((m - 0.1).abs() < 1e-15);
        assert!((v - 0.001).abs() < 1e-15);
        let theta = next.params["theta"].shard_of(0).data()[0];
        assert!((theta - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{theta}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mesh = DeviceMesh::single_host(1, 1).unwrap();
        let state = shard_params(&one(0.7), &replicated_plan(&["theta"]), &mesh, 0).unwrap();
        let mut grads = Sharded::new();
        grads.insert(
            "theta".into(),
            ShardedTensor::shard(&Tensor::zeros(&[1], DType::F64), Partition::Replicated, 1).unwrap(),
        );
        let next = adamw_step(&state, &grads, &AdamW::default(), true).unwrap();
        assert!(next.params["theta"].shard_of(0).bit_eq(state.params["theta"].shard_of(0)));
    }

    #[test]
    fn dp_sync_averages() {
        let mesh = DeviceMesh::single_host(2, 1).unwrap();
        let g = |v: f64| {
            let mut s = Sharded::new();
            s.insert(
                "w".into(),
                ShardedTensor::shard(&Tensor::full(&[3], v, DType::F64), Partition::Replicated, 1).unwrap(),
            );
            s
        };
        let out = dp_sync_grads(&[g(1.5), g(4.5)], &mesh).unwrap();
        assert_eq!(out["w"].shard_of(0).data(), &[3.0, 3.0, 3.0]);
        assert_eq!(mesh.report().get(crate::mesh::Collective::AllReduce).count, 1);
    }

    #[test]
    fn nonfinite_gradient_fails_in_checked_mode() {
        let mesh = DeviceMesh::single_host(1, 1).unwrap();
        let state = shard_params(&one(1.0), &replicated_plan(&["theta"]), &mesh, 0).unwrap();
        let mut grads = Sharded::new();
        grads.insert(
            "theta".into(),
            ShardedTensor::shard(&Tensor::full(&[1], f64::NAN, DType::F64), Partition::Replicated, 1).unwrap(),
        );
        assert!(matches!(
            adamw_step(&state, &grads, &AdamW::default(), true),
            Err(SpmdError::NonFinite(_))
        ));
    }
}
