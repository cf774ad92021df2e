//! A small pre-norm decoder-only transformer.
//!
//! Parameter names:
//!
//! ```text
//! embed/tokens            [vocab, d_model]
//! embed/positions         [max_seq_len, d_model]
//! block_{i}/ln1/scale     [d_model]       block_{i}/ln1/bias  [d_model]
//! block_{i}/attn/{q,k,v,o}/kernel         [d_model, d_model]
//! block_{i}/ln2/scale     [d_model]       block_{i}/ln2/bias  [d_model]
//! block_{i}/mlp/fc1/kernel [d_ff, d_model] block_{i}/mlp/fc1/bias [d_ff]
//! block_{i}/mlp/fc2/kernel [d_model, d_ff] block_{i}/mlp/fc2/bias [d_model]
//! ln_f/scale, ln_f/bias   [d_model]
//! embed/lm_head           [vocab, d_model]   (only when embeddings are untied)
//! ```
//!
//! Kernels are `[out_features, in_features]`. Attention projections carry no
//! bias. [`forward`] runs sharded through [`Ctx`]; [`reference_loss`] is an
//! independent single-device implementation on a plain [`Graph`].

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::params::ParamTree;
use crate::spmd::{Ctx, DistTensor, Result, SpmdError};
use crate::tensor::{DType, Graph, NodeId, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl Default for TransformerConfig {
    /// The toy model used by `audit` and the examples.
    fn default() -> Self {
        Self {
            vocab_size: 32,
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 16,
            tie_embeddings: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(SpmdError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(SpmdError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in initialization order.
    pub fn shapes(&self) -> IndexMap<String, Vec<usize>> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut s = IndexMap::new();
        s.insert("embed/tokens".into(), vec![v, d]);
        s.insert("embed/positions".into(), vec![self.max_seq_len, d]);
        for i in 0..self.n_layers {
            let p = format!("block_{i}");
            s.insert(format!("{p}/ln1/scale"), vec![d]);
            s.insert(format!("{p}/ln1/bias"), vec![d]);
            for m in ["q", "k", "v", "o"] {
                s.insert(format!("{p}/attn/{m}/kernel"), vec![d, d]);
            }
            s.insert(format!("{p}/ln2/scale"), vec![d]);
            s.insert(format!("{p}/ln2/bias"), vec![d]);
            s.insert(format!("{p}/mlp/fc1/kernel"), vec![f, d]);
            s.insert(format!("{p}/mlp/fc1/bias"), vec![f]);
            s.insert(format!("{p}/mlp/fc2/kernel"), vec![d, f]);
            s.insert(format!("{p}/mlp/fc2/bias"), vec![d]);
        }
        s.insert("ln_f/scale".into(), vec![d]);
        s.insert("ln_f/bias".into(), vec![d]);
        if !self.tie_embeddings {
            s.insert("embed/lm_head".into(), vec![v, d]);
        }
        s
    }

    /// Random initialization: norm scales 1, biases 0, kernels
    /// `N(0, 1/in_features)`, embeddings `N(0, 0.1²)`.
    pub fn init(&self, seed: u64, dtype: DType) -> Result<ParamTree> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = ParamTree::new();
        for (name, shape) in self.shapes() {
            let n: usize = shape.iter().product();
            let t = if name.ends_with("/scale") {
                Tensor::ones(&shape, dtype)
            } else if name.ends_with("/bias") {
                Tensor::zeros(&shape, dtype)
            } else {
                let std = if name.starts_with("embed/") {
                    0.1
                } else {
                    1.0 / (shape[1] as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape, data, dtype)?
            };
            tree.insert(name, t);
        }
        Ok(tree)
    }
}

fn positions(t: usize) -> Result<Tensor> {
    Ok(Tensor::from_indices(&[t], &(0..t).collect::<Vec<_>>())?)
}

fn check_ids(cfg: &TransformerConfig, ids: &Tensor) -> Result<(usize, usize)> {
    match ids.shape() {
        &[b, t] if t <= cfg.max_seq_len => Ok((b, t)),
        s => Err(SpmdError::Config(format!(
            "token ids must be [batch, seq<={}], got {s:?}",
            cfg.max_seq_len
        ))),
    }
}

/// Logits `[B, T, vocab]` for token ids `[B, T]`, recorded through `ctx`.
pub fn forward(ctx: &mut Ctx, cfg: &TransformerConfig, ids: &Tensor) -> Result<DistTensor> {
    let (_, t) = check_ids(cfg, ids)?;
    let tok = ctx.param("embed/tokens")?;
    let pos = ctx.param("embed/positions")?;
    let ids = ctx.input(ids)?;
    let pos_ids = ctx.input(&positions(t)?)?;
    let te = ctx.embedding(&tok, &ids)?;
    let pe = ctx.embedding(&pos, &pos_ids)?;
    let mut x = ctx.add(&te, &pe)?;
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("block_{i}/{s}");
        let (s1, b1) = (ctx.param(&p("ln1/scale"))?, ctx.param(&p("ln1/bias"))?);
        let h = ctx.layer_norm(&x, Some(&s1), Some(&b1), LN_EPS)?;
        let w: Vec<DistTensor> = ["q", "k", "v", "o"]
            .iter()
            .map(|m| ctx.param(&p(&format!("attn/{m}/kernel"))))
            .collect::<Result<_>>()?;
        let a = ctx.attention(&h, [&w[0], &w[1], &w[2], &w[3]], cfg.n_heads, true)?;
        x = ctx.add(&x, &a)?;
        let (s2, b2) = (ctx.param(&p("ln2/scale"))?, ctx.param(&p("ln2/bias"))?);
        let h = ctx.layer_norm(&x, Some(&s2), Some(&b2), LN_EPS)?;
        let (w1, c1) = (ctx.param(&p("mlp/fc1/kernel"))?, ctx.param(&p("mlp/fc1/bias"))?);
        let (w2, c2) = (ctx.param(&p("mlp/fc2/kernel"))?, ctx.param(&p("mlp/fc2/bias"))?);
        let h = ctx.linear(&h, &w1, Some(&c1))?;
        let h = ctx.gelu(&h)?;
        let h = ctx.linear(&h, &w2, Some(&c2))?;
        x = ctx.add(&x, &h)?;
    }
    let (sf, bf) = (ctx.param("ln_f/scale")?, ctx.param("ln_f/bias")?);
    let x = ctx.layer_norm(&x, Some(&sf), Some(&bf), LN_EPS)?;
    let head = if cfg.tie_embeddings { tok } else { ctx.param("embed/lm_head")? };
    ctx.linear(&x, &head, None)
}

/// Token-weighted mean cross entropy of next-token predictions.
pub fn lm_loss(
    ctx: &mut Ctx,
    cfg: &TransformerConfig,
    ids: &Tensor,
    labels: &Tensor,
    weights: &Tensor,
) -> Result<DistTensor> {
    let logits = forward(ctx, cfg, ids)?;
    let labels = ctx.input(labels)?;
    let ce = ctx.softmax_cross_entropy(&logits, &labels)?;
    ctx.weighted_mean(&ce, weights)
}

/// Single-device loss on a plain graph. Returns the loss node and one leaf
/// per parameter, in tree order.
pub fn reference_loss(
    g: &mut Graph,
    cfg: &TransformerConfig,
    params: &ParamTree,
    ids: &Tensor,
    labels: &Tensor,
    weights: &Tensor,
) -> Result<(NodeId, IndexMap<String, NodeId>)> {
    let (b, t) = check_ids(cfg, ids)?;
    let dtype = params
        .iter()
        .next()
        .map_or(DType::F64, |(_, v)| v.dtype());
    let leaves: IndexMap<String, NodeId> = params
        .iter()
        .map(|(n, v)| (n.to_string(), g.param(n, v.clone())))
        .collect();
    let p = |n: &str| -> Result<NodeId> {
        leaves
            .get(n)
            .copied()
            .ok_or_else(|| SpmdError::UnknownParam(n.to_string()))
    };
    let linear = |g: &mut Graph, x: NodeId, w: NodeId| -> Result<NodeId> {
        let wt = g.transpose(w, &[1, 0])?;
        Ok(g.matmul(x, wt)?)
    };
    let norm = |g: &mut Graph, x: NodeId, s: NodeId, b: NodeId| -> Result<NodeId> {
        let y = g.layer_norm(x, LN_EPS)?;
        let y = g.mul(y, s)?;
        Ok(g.add(y, b)?)
    };
    let (d, h) = (cfg.d_model, cfg.n_heads);
    let dh = d / h;

    let ids_n = g.input(ids.clone());
    let pos_n = g.input(positions(t)?);
    let te = g.embedding(p("embed/tokens")?, ids_n)?;
    let pe = g.embedding(p("embed/positions")?, pos_n)?;
    let mut x = g.add(te, pe)?;
    let mask: Vec<f64> = (0..t * t)
        .map(|i| if i % t > i / t { -1e9 } else { 0.0 })
        .collect();
    let mask = g.input(Tensor::new(vec![t, t], mask, dtype)?);
    for i in 0..cfg.n_layers {
        let n = |s: &str| format!("block_{i}/{s}");
        let hn = norm(g, x, p(&n("ln1/scale"))?, p(&n("ln1/bias"))?)?;
        let heads = |g: &mut Graph, m: &str| -> Result<NodeId> {
            let y = linear(g, hn, p(&n(&format!("attn/{m}/kernel")))?)?;
            let y = g.reshape(y, &[b, t, h, dh])?;
            Ok(g.transpose(y, &[0, 2, 1, 3])?)
        };
        let (q, k, v) = (heads(g, "q")?, heads(g, "k")?, heads(g, "v")?);
        let kt = g.transpose(k, &[0, 1, 3, 2])?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let s = g.add(s, mask)?;
        let a = g.softmax(s)?;
        let o = g.matmul(a, v)?;
        let o = g.transpose(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, t, d])?;
        let o = linear(g, o, p(&n("attn/o/kernel"))?)?;
        x = g.add(x, o)?;
        let hn = norm(g, x, p(&n("ln2/scale"))?, p(&n("ln2/bias"))?)?;
        let f = linear(g, hn, p(&n("mlp/fc1/kernel"))?)?;
        let f = g.add(f, p(&n("mlp/fc1/bias"))?)?;
        let f = g.gelu(f)?;
        let f = linear(g, f, p(&n("mlp/fc2/kernel"))?)?;
        let f = g.add(f, p(&n("mlp/fc2/bias"))?)?;
        x = g.add(x, f)?;
    }
    let x = norm(g, x, p("ln_f/scale")?, p("ln_f/bias")?)?;
    let head = if cfg.tie_embeddings { p("embed/tokens")? } else { p("embed/lm_head")? };
    let logits = linear(g, x, head)?;
    let labels = g.input(labels.clone());
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let total: f64 = weights.data().iter().sum();
    let w = g.input(weights.with_dtype(dtype)?);
    let cw = g.mul(ce, w)?;
    let s = g.sum(cw)?;
    let loss = g.scale(s, 1.0 / total)?;
    Ok((loss, leaves))
}
