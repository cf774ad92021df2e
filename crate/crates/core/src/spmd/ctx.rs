//! Layout-aware op recording for one data-parallel replica.
//!
//! A [`DistTensor`] is one graph node per model-parallel device plus a
//! layout: `Replicated` (every device holds the same value) or `Split(axis)`
//! (device `i` holds the `i`-th contiguous slice along `axis`). Ops run
//! locally when layouts allow it and insert collectives otherwise, so a loss
//! function written against [`Ctx`] runs unchanged for any model-parallel
//! degree.

use std::sync::Arc;

use indexmap::IndexMap;

use super::collectives::{AllReduce, CopyToGroup, Gather, Scatter};
use super::state::Sharded;
use super::{Result, SpmdError};
use crate::mesh::{DeviceMesh, Partition, ShardedTensor};
use crate::tensor::{CustomOp, DType, Graph, NodeId, Tensor};

/// Value spread over the model-parallel group of one replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistTensor {
    parts: Vec<NodeId>,
    layout: Partition,
}

impl DistTensor {
    pub fn layout(&self) -> Partition {
        self.layout
    }

    pub fn parts(&self) -> &[NodeId] {
        &self.parts
    }
}

/// Recording context for one replica's loss.
pub struct Ctx<'a> {
    graph: Graph,
    mesh: DeviceMesh,
    group: Vec<usize>,
    params: &'a Sharded,
    leaves: IndexMap<String, DistTensor>,
    dtype: DType,
}

impl<'a> Ctx<'a> {
    /// Context for data-parallel replica `dp_rank`, reading parameters from
    /// `params` (sharded over the model-parallel axis).
    pub fn new(mesh: &DeviceMesh, dp_rank: usize, params: &'a Sharded, dtype: DType, checked: bool) -> Self {
        Self {
            graph: Graph::new().checked(checked),
            mesh: mesh.clone(),
            group: mesh.mp_group(dp_rank),
            params,
            leaves: IndexMap::new(),
            dtype,
        }
    }

    pub fn mp(&self) -> usize {
        self.group.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn mesh(&self) -> &DeviceMesh {
        &self.mesh
    }

    /// Global shape of a value.
    pub fn shape(&self, x: &DistTensor) -> Vec<usize> {
        let mut s = self.graph.shape(x.parts[0]).to_vec();
        if let Partition::Split(a) = x.layout {
            s[a] *= x.parts.len();
        }
        s
    }

    /// Global value, assembled on the host without accounting traffic.
    pub fn value(&self, x: &DistTensor) -> Result<Tensor> {
        match x.layout {
            Partition::Replicated => Ok(self.graph.value(x.parts[0]).clone()),
            Partition::Split(a) => {
                let parts: Vec<&Tensor> = x.parts.iter().map(|&p| self.graph.value(p)).collect();
                Ok(Tensor::concat(&parts, a)?)
            }
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────────────

    /// The named parameter, laid out as stored.
    pub fn param(&mut self, name: &str) -> Result<DistTensor> {
        if let Some(d) = self.leaves.get(name) {
            return Ok(d.clone());
        }
        let sharded = self
            .params
            .get(name)
            .ok_or_else(|| SpmdError::UnknownParam(name.to_string()))?;
        let parts = sharded
            .shards()
            .iter()
            .map(|s| self.graph.param(name, s.clone()))
            .collect();
        let d = DistTensor {
            parts,
            layout: sharded.partition(),
        };
        self.leaves.insert(name.to_string(), d.clone());
        Ok(d)
    }

    /// A non-trainable value replicated on every device. Float data is cast to
    /// the context dtype; integer data is kept as is.
    pub fn input(&mut self, t: &Tensor) -> Result<DistTensor> {
        let t = if t.dtype().is_float() { t.with_dtype(self.dtype)? } else { t.clone() };
        let parts = (0..self.mp()).map(|_| self.graph.input(t.clone())).collect();
        Ok(DistTensor {
            parts,
            layout: Partition::Replicated,
        })
    }

    /// A non-trainable value given per device with an explicit layout.
    pub fn input_parts(&mut self, layout: Partition, parts: Vec<Tensor>) -> Result<DistTensor> {
        if parts.len() != self.mp() {
            return Err(SpmdError::Config(format!(
                "expected {} parts, got {}",
                self.mp(),
                parts.len()
            )));
        }
        let parts = parts.into_iter().map(|t| self.graph.input(t)).collect();
        Ok(DistTensor { parts, layout })
    }

    // ── Collectives ──────────────────────────────────────────────────────────

    fn collective(&mut self, op: Arc<dyn CustomOp>, x: &DistTensor, layout: Partition) -> Result<DistTensor> {
        let stacked = self.graph.custom(op, &x.parts)?;
        let parts = (0..x.parts.len())
            .map(|i| self.graph.select(stacked, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DistTensor { parts, layout })
    }

    /// Sums per-device partial values into a replicated value.
    pub fn all_reduce(&mut self, x: &DistTensor) -> Result<DistTensor> {
        if self.mp() == 1 {
            return Ok(DistTensor {
                parts: x.parts.clone(),
                layout: Partition::Replicated,
            });
        }
        let op = Arc::new(AllReduce {
            mesh: self.mesh.clone(),
            group: self.group.clone(),
        });
        self.collective(op, x, Partition::Replicated)
    }

    /// Marks a replicated value as entering sharded computation: identity
    /// forward, gradient summed over the group backward.
    fn copy_to_group(&mut self, x: &DistTensor) -> Result<DistTensor> {
        if self.mp() == 1 {
            return Ok(x.clone());
        }
        let op = Arc::new(CopyToGroup {
            mesh: self.mesh.clone(),
            group: self.group.clone(),
        });
        self.collective(op, x, Partition::Replicated)
    }

    /// Keeps each device's slice of a replicated value (no traffic forward).
    pub fn scatter(&mut self, x: &DistTensor, axis: usize) -> Result<DistTensor> {
        self.expect(x, Partition::Replicated, "scatter")?;
        if self.mp() == 1 {
            return Ok(DistTensor {
                parts: x.parts.clone(),
                layout: Partition::Split(axis),
            });
        }
        let op = Arc::new(Scatter {
            mesh: self.mesh.clone(),
            group: self.group.clone(),
            axis,
        });
        self.collective(op, x, Partition::Split(axis))
    }

    /// Makes a value replicated, all-gathering it if split.
    pub fn replicate(&mut self, x: &DistTensor) -> Result<DistTensor> {
        let Partition::Split(axis) = x.layout else {
            return Ok(x.clone());
        };
        if self.mp() == 1 {
            return Ok(DistTensor {
                parts: x.parts.clone(),
                layout: Partition::Replicated,
            });
        }
        let op = Arc::new(Gather {
            mesh: self.mesh.clone(),
            group: self.group.clone(),
            axis,
        });
        self.collective(op, x, Partition::Replicated)
    }

    fn expect(&self, x: &DistTensor, expected: Partition, op: &'static str) -> Result<()> {
        if x.layout != expected {
            return Err(SpmdError::Layout {
                op,
                expected,
                actual: x.layout,
            });
        }
        Ok(())
    }

    fn local(
        &mut self,
        xs: &[&DistTensor],
        layout: Partition,
        mut f: impl FnMut(&mut Graph, &[NodeId]) -> crate::tensor::Result<NodeId>,
    ) -> Result<DistTensor> {
        let n = xs[0].parts.len();
        let parts = (0..n)
            .map(|i| {
                let ins: Vec<NodeId> = xs.iter().map(|x| x.parts[i]).collect();
                f(&mut self.graph, &ins)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DistTensor { parts, layout })
    }

    // ── Linear layers ────────────────────────────────────────────────────────

    /// `x · Wᵀ (+ b)` with a `Split(0)` kernel: `x` must be replicated; the
    /// output is split along its last axis. No forward collective; backward
    /// sums input gradients over the group.
    pub fn column_parallel_linear(
        &mut self,
        x: &DistTensor,
        w: &DistTensor,
        b: Option<&DistTensor>,
    ) -> Result<DistTensor> {
        self.expect(x, Partition::Replicated, "column_parallel_linear (input)")?;
        self.expect(w, Partition::Split(0), "column_parallel_linear (kernel)")?;
        let last = self.graph.shape(x.parts[0]).len() - 1;
        let xc = self.copy_to_group(x)?;
        let mut y = self.local(&[&xc, w], Partition::Split(last), |g, v| {
            let wt = g.transpose(v[1], &[1, 0])?;
            g.matmul(v[0], wt)
        })?;
        if let Some(b) = b {
            let bs = match b.layout {
                Partition::Split(0) => b.clone(),
                Partition::Replicated => self.scatter(b, 0)?,
                actual => {
                    return Err(SpmdError::Layout {
                        op: "column_parallel_linear (bias)",
                        expected: Partition::Split(0),
                        actual,
                    })
                }
            };
            y = self.local(&[&y, &bs], Partition::Split(last), |g, v| g.add(v[0], v[1]))?;
        }
        Ok(y)
    }

    /// `x · Wᵀ (+ b)` with a `Split(1)` kernel: `x` must be split along its
    /// last axis; partial products are summed with one all-reduce and the
    /// output is replicated. The bias is added after the reduction.
    pub fn row_parallel_linear(
        &mut self,
        x: &DistTensor,
        w: &DistTensor,
        b: Option<&DistTensor>,
    ) -> Result<DistTensor> {
        let last = self.graph.shape(x.parts[0]).len() - 1;
        self.expect(x, Partition::Split(last), "row_parallel_linear (input)")?;
        self.expect(w, Partition::Split(1), "row_parallel_linear (kernel)")?;
        let partial = self.local(&[x, w], Partition::Replicated, |g, v| {
            let wt = g.transpose(v[1], &[1, 0])?;
            g.matmul(v[0], wt)
        })?;
        let y = self.all_reduce(&partial)?;
        match b {
            Some(b) => {
                let b = self.replicate(b)?;
                self.local(&[&y, &b], Partition::Replicated, |g, v| g.add(v[0], v[1]))
            }
            None => Ok(y),
        }
    }

    /// Linear layer that picks the parallel form from the kernel's layout,
    /// converting `x` as needed.
    pub fn linear(&mut self, x: &DistTensor, w: &DistTensor, b: Option<&DistTensor>) -> Result<DistTensor> {
        let last = self.graph.shape(x.parts[0]).len() - 1;
        match w.layout {
            Partition::Split(0) => {
                let x = self.replicate(x)?;
                self.column_parallel_linear(&x, w, b)
            }
            Partition::Split(1) => {
                let x = match x.layout {
                    Partition::Split(a) if a == last => x.clone(),
                    Partition::Replicated => self.scatter(x, last)?,
                    Partition::Split(_) => {
                        let r = self.replicate(x)?;
                        self.scatter(&r, last)?
                    }
                };
                self.row_parallel_linear(&x, w, b)
            }
            Partition::Replicated => {
                let x = self.replicate(x)?;
                let mut y = self.local(&[&x, w], Partition::Replicated, |g, v| {
                    let wt = g.transpose(v[1], &[1, 0])?;
                    g.matmul(v[0], wt)
                })?;
                if let Some(b) = b {
                    let b = self.replicate(b)?;
                    y = self.local(&[&y, &b], Partition::Replicated, |g, v| g.add(v[0], v[1]))?;
                }
                Ok(y)
            }
            Partition::Split(d) => Err(SpmdError::Layout {
                op: "linear (kernel)",
                expected: Partition::Split(0),
                actual: Partition::Split(d),
            }),
        }
    }

    // ── Attention ────────────────────────────────────────────────────────────

    /// Multi-head self-attention over `x: [B, T, D]` with bias-free Q/K/V/O
    /// kernels of shape `[D, D]`. With Q/K/V split on dimension 0 and O on
    /// dimension 1, each device owns a contiguous range of heads and the
    /// interior needs no communication. When the heads do not divide evenly
    /// the projections are gathered and attention runs replicated.
    pub fn attention(
        &mut self,
        x: &DistTensor,
        w: [&DistTensor; 4],
        n_heads: usize,
        causal: bool,
    ) -> Result<DistTensor> {
        let [wq, wk, wv, wo] = w;
        let shape = self.shape(x);
        let (t, d) = (shape[1], shape[2]);
        if d % n_heads != 0 {
            return Err(SpmdError::Config(format!("d_model {d} is not divisible by n_heads {n_heads}")));
        }
        let dh = d / n_heads;
        let mut q = self.linear(x, wq, None)?;
        let mut k = self.linear(x, wk, None)?;
        let mut v = self.linear(x, wv, None)?;
        let head_split = n_heads.is_multiple_of(self.mp())
            && [&q, &k, &v].iter().all(|p| p.layout == Partition::Split(2));
        if !head_split {
            q = self.replicate(&q)?;
            k = self.replicate(&k)?;
            v = self.replicate(&v)?;
        }
        let local_heads = if head_split { n_heads / self.mp() } else { n_heads };
        let mask = if causal {
            let data = (0..t * t)
                .map(|i| if i % t > i / t { -1e9 } else { 0.0 })
                .collect();
            Some(self.input(&Tensor::from_vec(&[t, t], data)?)?)
        } else {
            None
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let layout = q.layout;
        let mut ins = vec![&q, &k, &v];
        if let Some(m) = &mask {
            ins.push(m);
        }
        let ctx_out = self.local(&ins, layout, |g, p| {
            let b = g.shape(p[0])[0];
            let heads = |g: &mut Graph, x: NodeId| -> crate::tensor::Result<NodeId> {
                let r = g.reshape(x, &[b, t, local_heads, dh])?;
                g.transpose(r, &[0, 2, 1, 3])
            };
            let (qh, kh, vh) = (heads(g, p[0])?, heads(g, p[1])?, heads(g, p[2])?);
            let kt = g.transpose(kh, &[0, 1, 3, 2])?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale)?;
            if p.len() == 4 {
                s = g.add(s, p[3])?;
            }
            let a = g.softmax(s)?;
            let o = g.matmul(a, vh)?;
            let o = g.transpose(o, &[0, 2, 1, 3])?;
            g.reshape(o, &[b, t, local_heads * dh])
        })?;
        self.linear(&ctx_out, wo, None)
    }

    // ── Elementwise and shape ops ────────────────────────────────────────────

    /// Brings two operands to a common layout: equal layouts stay local,
    /// anything else is replicated.
    fn align(&mut self, a: &DistTensor, b: &DistTensor) -> Result<(DistTensor, DistTensor)> {
        if a.layout == b.layout && self.graph.shape(a.parts[0]).len() == self.graph.shape(b.parts[0]).len() {
            return Ok((a.clone(), b.clone()));
        }
        Ok((self.replicate(a)?, self.replicate(b)?))
    }

    pub fn add(&mut self, a: &DistTensor, b: &DistTensor) -> Result<DistTensor> {
        let (a, b) = self.align(a, b)?;
        let layout = a.layout;
        self.local(&[&a, &b], layout, |g, v| g.add(v[0], v[1]))
    }

    pub fn sub(&mut self, a: &DistTensor, b: &DistTensor) -> Result<DistTensor> {
        let (a, b) = self.align(a, b)?;
        let layout = a.layout;
        self.local(&[&a, &b], layout, |g, v| g.sub(v[0], v[1]))
    }

    pub fn mul(&mut self, a: &DistTensor, b: &DistTensor) -> Result<DistTensor> {
        let (a, b) = self.align(a, b)?;
        let layout = a.layout;
        self.local(&[&a, &b], layout, |g, v| g.mul(v[0], v[1]))
    }

    pub fn scale(&mut self, x: &DistTensor, c: f64) -> Result<DistTensor> {
        self.local(&[x], x.layout, |g, v| g.scale(v[0], c))
    }

    pub fn gelu(&mut self, x: &DistTensor) -> Result<DistTensor> {
        self.local(&[x], x.layout, |g, v| g.gelu(v[0]))
    }

    pub fn relu(&mut self, x: &DistTensor) -> Result<DistTensor> {
        self.local(&[x], x.layout, |g, v| g.relu(v[0]))
    }

    /// Layer norm over the last axis followed by an optional elementwise
    /// scale and shift.
    pub fn layer_norm(
        &mut self,
        x: &DistTensor,
        scale: Option<&DistTensor>,
        shift: Option<&DistTensor>,
        eps: f64,
    ) -> Result<DistTensor> {
        let x = self.replicate(x)?;
        let mut y = self.local(&[&x], Partition::Replicated, |g, v| g.layer_norm(v[0], eps))?;
        if let Some(s) = scale {
            let s = self.replicate(s)?;
            y = self.local(&[&y, &s], Partition::Replicated, |g, v| g.mul(v[0], v[1]))?;
        }
        if let Some(b) = shift {
            let b = self.replicate(b)?;
            y = self.local(&[&y, &b], Partition::Replicated, |g, v| g.add(v[0], v[1]))?;
        }
        Ok(y)
    }

    pub fn embedding(&mut self, table: &DistTensor, ids: &DistTensor) -> Result<DistTensor> {
        let table = self.replicate(table)?;
        let ids = self.replicate(ids)?;
        self.local(&[&table, &ids], Partition::Replicated, |g, v| g.embedding(v[0], v[1]))
    }

    pub fn matmul(&mut self, a: &DistTensor, b: &DistTensor) -> Result<DistTensor> {
        let a = self.replicate(a)?;
        let b = self.replicate(b)?;
        self.local(&[&a, &b], Partition::Replicated, |g, v| g.matmul(v[0], v[1]))
    }

    pub fn softmax(&mut self, x: &DistTensor) -> Result<DistTensor> {
        let x = self.replicate(x)?;
        self.local(&[&x], Partition::Replicated, |g, v| g.softmax(v[0]))
    }

    /// Per-position cross entropy of `logits: [..., C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: &DistTensor, labels: &DistTensor) -> Result<DistTensor> {
        let logits = self.replicate(logits)?;
        let labels = self.replicate(labels)?;
        self.local(&[&logits, &labels], Partition::Replicated, |g, v| {
            g.softmax_cross_entropy(v[0], v[1])
        })
    }

    pub fn reshape(&mut self, x: &DistTensor, shape: &[usize]) -> Result<DistTensor> {
        let x = self.replicate(x)?;
        self.local(&[&x], Partition::Replicated, |g, v| g.reshape(v[0], shape))
    }

    pub fn transpose(&mut self, x: &DistTensor, perm: &[usize]) -> Result<DistTensor> {
        let layout = match x.layout {
            Partition::Split(a) => Partition::Split(perm.iter().position(|&p| p == a).ok_or_else(|| {
                SpmdError::Config(format!("permutation {perm:?} does not contain axis {a}"))
            })?),
            Partition::Replicated => Partition::Replicated,
        };
        self.local(&[x], layout, |g, v| g.transpose(v[0], perm))
    }

    pub fn slice(&mut self, x: &DistTensor, axis: usize, start: usize, len: usize) -> Result<DistTensor> {
        let x = self.replicate(x)?;
        self.local(&[&x], Partition::Replicated, |g, v| g.slice(v[0], axis, start, len))
    }

    pub fn concat(&mut self, xs: &[&DistTensor], axis: usize) -> Result<DistTensor> {
        let xs = xs.iter().map(|x| self.replicate(x)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DistTensor> = xs.iter().collect();
        self.local(&refs, Partition::Replicated, |g, v| g.concat(v, axis))
    }

    /// Sum of all elements; split values reduce locally and then all-reduce.
    pub fn sum(&mut self, x: &DistTensor) -> Result<DistTensor> {
        let s = self.local(&[x], x.layout, |g, v| g.sum(v[0]))?;
        match x.layout {
            Partition::Replicated => Ok(s),
            Partition::Split(_) => self.all_reduce(&s),
        }
    }

    pub fn mean(&mut self, x: &DistTensor) -> Result<DistTensor> {
        let n: usize = self.shape(x).iter().product();
        match x.layout {
            Partition::Replicated => self.local(&[x], Partition::Replicated, |g, v| g.mean(v[0])),
            Partition::Split(_) => {
                let s = self.sum(x)?;
                self.scale(&s, 1.0 / n as f64)
            }
        }
    }

    /// `Σ x·w / Σ w` for constant weights `w` shaped like `x`.
    pub fn weighted_mean(&mut self, x: &DistTensor, weights: &Tensor) -> Result<DistTensor> {
        let total: f64 = weights.data().iter().sum();
        if total <= 0.0 {
            return Err(SpmdError::Config("weights sum to zero".into()));
        }
        let w = self.input(weights)?;
        let xw = self.mul(x, &w)?;
        let s = self.sum(&xw)?;
        self.scale(&s, 1.0 / total)
    }

    // ── Gradients ────────────────────────────────────────────────────────────

    fn loss_total(&mut self, loss: &DistTensor) -> Result<NodeId> {
        let n = self.graph.value(loss.parts[0]).numel();
        if n != 1 || loss.layout != Partition::Replicated {
            return Err(SpmdError::NonScalarLoss(self.shape(loss)));
        }
        // Every device differentiates its own copy of the loss.
        let mut total = loss.parts[0];
        for &p in &loss.parts[1..] {
            total = self.graph.add(total, p)?;
        }
        Ok(total)
    }

    /// Gradients of `loss` with respect to `wrt`, returned as constants with
    /// the same layouts. The graph is left usable, so a caller can build a
    /// first-order update such as `θ − α·g` and keep differentiating.
    pub fn detached_grad(&mut self, loss: &DistTensor, wrt: &[&DistTensor]) -> Result<Vec<DistTensor>> {
        let total = self.loss_total(loss)?;
        let ids: Vec<NodeId> = wrt.iter().flat_map(|w| w.parts.iter().copied()).collect();
        let mut grads = self.graph.grad(total, &ids)?.into_iter();
        wrt.iter()
            .map(|w| {
                let parts: Vec<Tensor> = grads.by_ref().take(w.parts.len()).collect();
                self.input_parts(w.layout, parts)
            })
            .collect()
    }

    /// Loss value and the gradient of every stored parameter, sharded like
    /// the parameter. Parameters the loss never read get zeros.
    pub fn backward(mut self, loss: &DistTensor) -> Result<(f64, Sharded)> {
        let value = self.graph.value(loss.parts[0]).item()?;
        let total = self.loss_total(loss)?;
        let ids: Vec<NodeId> = self.leaves.values().flat_map(|d| d.parts.iter().copied()).collect();
        let mut flat = self.graph.grad(total, &ids)?.into_iter();
        let mut by_name: IndexMap<&str, Vec<Tensor>> = IndexMap::new();
        for (name, d) in &self.leaves {
            by_name.insert(name, flat.by_ref().take(d.parts.len()).collect());
        }
        let mut out = Sharded::new();
        for (name, p) in self.params {
            let shards = match by_name.swap_remove(name.as_str()) {
                // Replicated copies carry identical full gradients; each
                // device keeps its own.
                Some(gs) => gs,
                None => p
                    .shards()
                    .iter()
                    .map(|s| Tensor::zeros(s.shape(), s.dtype()))
                    .collect(),
            };
            out.insert(name.clone(), ShardedTensor::from_shards(p.partition(), shards)?);
        }
        Ok((value, out))
    }
}
