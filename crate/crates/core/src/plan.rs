//! Structural roles for parameters and the two tensor-parallel rules.
//!
//! Rule 1: consecutive fully-connected kernels alternate between splitting
//! dimension 0 and dimension 1, starting at 0 within each block.
//! Rule 2: attention Q, K and V split dimension 0; the output projection
//! splits dimension 1.
//!
//! Kernels use the `[out_features, in_features]` layout, so dimension 0 is
//! column-parallel (outputs sharded) and dimension 1 is row-parallel (inputs
//! sharded). 1-D tensors and embeddings are always replicated.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

use crate::mesh::Partition;
use crate::params::ParamTree;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("n_shards must be at least 1")]
    ZeroShards,
    #[error(
        "model cannot be split {n_shards} ways: every splittable kernel has a \
         target dimension smaller than that (largest is {largest})"
    )]
    TooManyShards { n_shards: usize, largest: usize },
    #[error(
        "conflicting role overrides for `{name}`: `{a}` and `{b}` match with \
         equal specificity but assign {role_a} and {role_b}"
    )]
    ConflictingOverrides {
        name: String,
        a: String,
        b: String,
        role_a: ParamRole,
        role_b: ParamRole,
    },
    #[error("plan line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad role `{0}` (expected attention_qkv, attention_out, fc:<i>, embedding, norm, bias or other)")]
    BadRole(String),
}

pub type Result<T, E = PlanError> = std::result::Result<T, E>;

// ── Roles ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    AttentionQkv,
    AttentionOut,
    /// Position of the kernel in its block's dataflow, 0-based.
    FullyConnected(usize),
    Embedding,
    Norm,
    Bias,
    Other,
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamRole::AttentionQkv => f.write_str("attention_qkv"),
            ParamRole::AttentionOut => f.write_str("attention_out"),
            ParamRole::FullyConnected(i) => write!(f, "fc:{i}"),
            ParamRole::Embedding => f.write_str("embedding"),
            ParamRole::Norm => f.write_str("norm"),
            ParamRole::Bias => f.write_str("bias"),
            ParamRole::Other => f.write_str("other"),
        }
    }
}

impl FromStr for ParamRole {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention_qkv" => ParamRole::AttentionQkv,
            "attention_out" => ParamRole::AttentionOut,
            "embedding" => ParamRole::Embedding,
            "norm" => ParamRole::Norm,
            "bias" => ParamRole::Bias,
            "other" => ParamRole::Other,
            _ => s
                .strip_prefix("fc:")
                .and_then(|i| i.parse().ok())
                .map(ParamRole::FullyConnected)
                .ok_or_else(|| PlanError::BadRole(s.to_string()))?,
        })
    }
}

pub type Roles = IndexMap<String, ParamRole>;
pub type Shapes = IndexMap<String, Vec<usize>>;

const NORM_TOKENS: &[&str] = &["ln", "norm", "layer_norm", "layernorm", "rms_norm", "scale"];
const EMBED_TOKENS: &[&str] = &["wte", "wpe"];
const ATTN_TOKENS: &[&str] = &["attn", "attention", "self_attn", "self_attention", "mha", "cross_attn"];
const QKV_TOKENS: &[&str] = &["q", "k", "v", "qkv", "query", "key", "value"];
const OUT_TOKENS: &[&str] = &["o", "out", "output", "out_proj", "o_proj", "proj"];
const FC_TOKENS: &[&str] = &["mlp", "ffn", "fc", "dense", "feed_forward"];

/// A path segment matches a token when the segment, or one of its
/// `_`-separated words, equals the token optionally followed by digits
/// (`ln1`, `ln_f`, `q_proj`, `dense_2`, `final_norm`).
fn segment_matches(segment: &str, token: &str) -> bool {
    let seg = segment.to_ascii_lowercase();
    let word_matches = |w: &str| {
        w.strip_prefix(token)
            .is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit()))
    };
    word_matches(&seg)
        || seg
            .strip_prefix(token)
            .is_some_and(|rest| rest.starts_with('_'))
        || seg.split('_').any(word_matches)
}

fn any_match(segment: &str, tokens: &[&str]) -> bool {
    tokens.iter().any(|t| segment_matches(segment, t))
}

/// Glob match where `*` spans any run of characters, `/` included.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let (p, n) = (pattern.as_bytes(), name.as_bytes());
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ni));
            pi += 1;
        } else if pi < p.len() && p[pi] == n[ni] {
            pi += 1;
            ni += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

fn specificity(pattern: &str) -> usize {
    pattern.chars().filter(|&c| c != '*').count()
}

/// Block key for fully-connected ordering: the path above the layer's own
/// module (`block_0/mlp/fc1/kernel` belongs to `block_0/mlp`).
pub fn fc_block(name: &str) -> &str {
    let mut it = name.rmatch_indices('/');
    match (it.next(), it.next()) {
        (Some(_), Some((i, _))) => &name[..i],
        _ => "",
    }
}

/// Orders strings with embedded numbers numerically (`fc2` < `fc10`).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    while let (Some(&x), Some(&y)) = (a.first(), b.first()) {
        if x.is_ascii_digit() && y.is_ascii_digit() {
            let da = a.iter().take_while(|c| c.is_ascii_digit()).count();
            let db = b.iter().take_while(|c| c.is_ascii_digit()).count();
            let (na, nb) = (&a[..da], &b[..db]);
            let strip = |s: &[u8]| -> usize { s.iter().take_while(|&&c| c == b'0').count() };
            let (ta, tb) = (&na[strip(na)..], &nb[strip(nb)..]);
            let ord = ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb));
            if ord != Ordering::Equal {
                return ord;
            }
            a = &a[da..];
            b = &b[db..];
        } else {
            if x != y {
                return x.cmp(&y);
            }
            a = &a[1..];
            b = &b[1..];
        }
    }
    a.len().cmp(&b.len())
}

fn heuristic_role(name: &str, shape: &[usize]) -> Option<ParamRole> {
    let segments: Vec<&str> = name.split('/').collect();
    if shape.len() <= 1 {
        return Some(if segments.iter().any(|s| any_match(s, NORM_TOKENS)) {
            ParamRole::Norm
        } else {
            ParamRole::Bias
        });
    }
    if segments
        .iter()
        .any(|s| s.to_ascii_lowercase().contains("embed") || any_match(s, EMBED_TOKENS))
    {
        return Some(ParamRole::Embedding);
    }
    if shape.len() != 2 {
        return None;
    }
    if let Some(a) = segments.iter().position(|s| any_match(s, ATTN_TOKENS)) {
        let inner = &segments[a + 1..];
        if inner.iter().any(|s| any_match(s, QKV_TOKENS)) {
            return Some(ParamRole::AttentionQkv);
        }
        if inner.iter().any(|s| any_match(s, OUT_TOKENS)) {
            return Some(ParamRole::AttentionOut);
        }
        return None;
    }
    if segments.iter().any(|s| any_match(s, QKV_TOKENS)) {
        return Some(ParamRole::AttentionQkv);
    }
    if segments.iter().any(|s| any_match(s, FC_TOKENS)) {
        // Index assigned below once the whole block is known.
        return Some(ParamRole::FullyConnected(usize::MAX));
    }
    None
}

/// Assigns every parameter exactly one role.
///
/// Overrides are `*`-glob patterns; when several match, the one with the most
/// literal characters wins. Unrecognized 2-D tensors become
/// [`ParamRole::Other`] with a warning.
pub fn infer_roles(shapes: &Shapes, overrides: &IndexMap<String, ParamRole>) -> Result<Roles> {
    let mut roles = Roles::new();
    for (name, shape) in shapes {
        let mut best: Option<(&str, ParamRole, usize)> = None;
        for (pattern, &role) in overrides {
            if !glob_match(pattern, name) {
                continue;
            }
            let spec = specificity(pattern);
            match best {
                Some((prev, prev_role, s)) if s == spec && prev_role != role => {
                    return Err(PlanError::ConflictingOverrides {
                        name: name.clone(),
                        a: prev.to_string(),
                        b: pattern.clone(),
                        role_a: prev_role,
                        role_b: role,
                    });
                }
                Some((_, _, s)) if s >= spec => {}
                _ => best = Some((pattern, role, spec)),
            }
        }
        let role = match best {
            Some((_, role, _)) => role,
            None => heuristic_role(name, shape).unwrap_or_else(|| {
                if shape.len() == 2 {
                    log::warn!("no structural role recognized for 2-D parameter `{name}`; replicating");
                }
                ParamRole::Other
            }),
        };
        roles.insert(name.clone(), role);
    }

    // Number heuristic FC kernels by natural path order within each block.
    let mut blocks: IndexMap<&str, Vec<&str>> = IndexMap::new();
    for (name, role) in &roles {
        if *role == ParamRole::FullyConnected(usize::MAX) {
            blocks.entry(fc_block(name)).or_default().push(name);
        }
    }
    let mut numbered = Vec::new();
    for names in blocks.values_mut() {
        names.sort_by(|a, b| natural_cmp(a, b));
        numbered.extend(names.iter().enumerate().map(|(i, n)| (n.to_string(), i)));
    }
    for (name, i) in numbered {
        roles.insert(name, ParamRole::FullyConnected(i));
    }
    Ok(roles)
}

// ── Plans ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardingPlan {
    pub n_shards: usize,
    pub entries: IndexMap<String, Partition>,
}

impl ShardingPlan {
    pub fn get(&self, name: &str) -> Option<Partition> {
        self.entries.get(name).copied()
    }

    /// `name<TAB>replicated|split:<dim>` lines under a `# n_shards=N` header.
    pub fn to_text(&self) -> String {
        let mut out = format!("# n_shards={}\n", self.n_shards);
        for (name, p) in &self.entries {
            out.push_str(&format!("{name}\t{p}\n"));
        }
        out
    }

    /// Parses [`ShardingPlan::to_text`] output. Without a header, `n_shards`
    /// defaults to 1.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut n_shards = 1;
        let mut entries = IndexMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| PlanError::Parse { line: line_no, msg };
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(n) = comment.trim().strip_prefix("n_shards=") {
                    n_shards = n.trim().parse().map_err(|_| err(format!("bad n_shards `{n}`")))?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (name, part) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `name<TAB>partition`".into()))?;
            let part: Partition = part.trim().parse().map_err(err)?;
            if entries.insert(name.to_string(), part).is_some() {
                return Err(err(format!("duplicate entry `{name}`")));
            }
        }
        if n_shards == 0 {
            return Err(PlanError::ZeroShards);
        }
        Ok(Self { n_shards, entries })
    }

    /// Element counts `(replicated, split)` over all parameters.
    pub fn element_split(&self, shapes: &Shapes) -> (usize, usize) {
        let mut rep = 0;
        let mut split = 0;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            match self.get(name) {
                Some(Partition::Split(_)) => split += n,
                _ => rep += n,
            }
        }
        (rep, split)
    }

    /// Parameter elements held by one device: replicated + split / n_shards.
    pub fn per_device_elements(&self, shapes: &Shapes) -> usize {
        let (rep, split) = self.element_split(shapes);
        rep + split / self.n_shards
    }
}

/// The partition the rules ask for, before divisibility is considered.
pub fn intended_partition(role: ParamRole, rank: usize) -> Partition {
    if rank != 2 {
        return Partition::Replicated;
    }
    match role {
        ParamRole::AttentionQkv => Partition::Split(0),
        ParamRole::AttentionOut => Partition::Split(1),
        ParamRole::FullyConnected(i) => Partition::Split(i % 2),
        _ => Partition::Replicated,
    }
}

/// Applies both rules. Returns the plan plus one warning per tensor that fell
/// back to replication because its target dimension is not divisible.
pub fn derive_plan(roles: &Roles, shapes: &Shapes, n_shards: usize) -> Result<(ShardingPlan, Vec<String>)> {
    if n_shards == 0 {
        return Err(PlanError::ZeroShards);
    }
    let mut entries = IndexMap::new();
    let mut warnings = Vec::new();
    let mut largest_target: Option<usize> = None;
    for (name, shape) in shapes {
        let role = roles.get(name).copied().unwrap_or(ParamRole::Other);
        let part = match intended_partition(role, shape.len()) {
            Partition::Split(d) => {
                largest_target = Some(largest_target.unwrap_or(0).max(shape[d]));
                if shape[d] % n_shards == 0 {
                    Partition::Split(d)
                } else {
                    let msg = format!(
                        "`{name}` {shape:?}: dim {d} of size {} is not divisible by {n_shards}; replicating",
                        shape[d]
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                    Partition::Replicated
                }
            }
            Partition::Replicated => Partition::Replicated,
        };
        entries.insert(name.clone(), part);
    }
    if let Some(largest) = largest_target {
        if n_shards > largest {
            return Err(PlanError::TooManyShards { n_shards, largest });
        }
    }
    Ok((ShardingPlan { n_shards, entries }, warnings))
}

/// Roles + plan for a parameter tree in one call.
pub fn plan_for(
    params: &ParamTree,
    overrides: &IndexMap<String, ParamRole>,
    n_shards: usize,
) -> Result<(Roles, ShardingPlan, Vec<String>)> {
    let shapes = params.shapes();
    let roles = infer_roles(&shapes, overrides)?;
    let (plan, warnings) = derive_plan(&roles, &shapes, n_shards)?;
    Ok((roles, plan, warnings))
}

/// Comparison plan that splits every sharded kernel along dimension 0.
pub fn same_dim_baseline(plan: &ShardingPlan, shapes: &Shapes) -> ShardingPlan {
    let entries = plan
        .entries
        .iter()
        .map(|(name, &p)| {
            let p = match p {
                Partition::Split(_) if shapes[name][0].is_multiple_of(plan.n_shards) => Partition::Split(0),
                Partition::Split(_) => Partition::Replicated,
                Partition::Replicated => Partition::Replicated,
            };
            (name.clone(), p)
        })
        .collect();
    ShardingPlan {
        n_shards: plan.n_shards,
        entries,
    }
}

// ── Validation ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingEntry { name: String },
    UnknownEntry { name: String },
    DimOutOfRange { name: String, dim: usize, rank: usize },
    NotDivisible { name: String, dim: usize, size: usize, n_shards: usize },
    ConsecutiveFcShareDim { first: String, second: String, dim: usize },
    RuleNotApplied { name: String, role: ParamRole, expected: Partition, got: Partition },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingEntry { name } => write!(f, "`{name}`: no plan entry"),
            Violation::UnknownEntry { name } => write!(f, "`{name}`: plan entry for unknown parameter"),
            Violation::DimOutOfRange { name, dim, rank } => {
                write!(f, "`{name}`: dim out of range ({dim} for rank {rank})")
            }
            Violation::NotDivisible { name, dim, size, n_shards } => {
                write!(f, "`{name}`: dim {dim} of size {size} not divisible by {n_shards}")
            }
            Violation::ConsecutiveFcShareDim { first, second, dim } => write!(
                f,
                "consecutive FC kernels share split dim: `{first}` and `{second}` both split:{dim}"
            ),
            Violation::RuleNotApplied { name, role, expected, got } => {
                write!(f, "`{name}` ({role}): expected {expected}, got {got}")
            }
        }
    }
}

/// Every broken plan invariant; empty iff the plan is valid for `shapes`.
pub fn validate_plan(plan: &ShardingPlan, shapes: &Shapes, roles: &Roles) -> Vec<Violation> {
    let mut out = Vec::new();
    for name in plan.entries.keys() {
        if !shapes.contains_key(name) {
            out.push(Violation::UnknownEntry { name: name.clone() });
        }
    }
    for (name, shape) in shapes {
        let Some(part) = plan.get(name) else {
            out.push(Violation::MissingEntry { name: name.clone() });
            continue;
        };
        if let Partition::Split(d) = part {
            if d >= shape.len() {
                out.push(Violation::DimOutOfRange {
                    name: name.clone(),
                    dim: d,
                    rank: shape.len(),
                });
                continue;
            }
            if shape[d] % plan.n_shards != 0 {
                out.push(Violation::NotDivisible {
                    name: name.clone(),
                    dim: d,
                    size: shape[d],
                    n_shards: plan.n_shards,
                });
            }
        }
        let role = roles.get(name).copied().unwrap_or(ParamRole::Other);
        if matches!(role, ParamRole::AttentionQkv | ParamRole::AttentionOut) {
            let expected = intended_partition(role, shape.len());
            let permitted = match expected {
                Partition::Split(d) => shape[d] % plan.n_shards == 0,
                Partition::Replicated => true,
            };
            if permitted && part != expected {
                out.push(Violation::RuleNotApplied {
                    name: name.clone(),
                    role,
                    expected,
                    got: part,
                });
            }
        }
    }

    let mut blocks: IndexMap<&str, Vec<(usize, &str)>> = IndexMap::new();
    for (name, role) in roles {
        if let ParamRole::FullyConnected(i) = role {
            blocks.entry(fc_block(name)).or_default().push((*i, name));
        }
    }
    for fcs in blocks.values_mut() {
        fcs.sort();
        for pair in fcs.windows(2) {
            let ((_, a), (_, b)) = (pair[0], pair[1]);
            if let (Some(Partition::Split(da)), Some(Partition::Split(db))) = (plan.get(a), plan.get(b)) {
                if da == db {
                    out.push(Violation::ConsecutiveFcShareDim {
                        first: a.to_string(),
                        second: b.to_string(),
                        dim: da,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> Shapes {
        [
            ("block_0/ln1/scale", vec![64]),
            ("block_0/attn/q/kernel", vec![64, 64]),
            ("block_0/attn/k/kernel", vec![64, 64]),
            ("block_0/attn/v/kernel", vec![64, 64]),
            ("block_0/attn/o/kernel", vec![64, 64]),
            ("block_0/ln2/scale", vec![64]),
            ("block_0/mlp/fc1/kernel", vec![256, 64]),
            ("block_0/mlp/fc1/bias", vec![256]),
            ("block_0/mlp/fc2/kernel", vec![64, 256]),
            ("block_0/mlp/fc2/bias", vec![64]),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect()
    }

    fn no_overrides() -> IndexMap<String, ParamRole> {
        IndexMap::new()
    }

    #[test]
    fn roles_of_the_canonical_block() {
        let roles = infer_roles(&canonical(), &no_overrides()).unwrap();
        assert_eq!(roles["block_0/attn/q/kernel"], ParamRole::AttentionQkv);
        assert_eq!(roles["block_0/attn/o/kernel"], ParamRole::AttentionOut);
        assert_eq!(roles["block_0/mlp/fc1/kernel"], ParamRole::FullyConnected(0));
        assert_eq!(roles["block_0/mlp/fc2/kernel"], ParamRole::FullyConnected(1));
        assert_eq!(roles["block_0/ln1/scale"], ParamRole::Norm);
        assert_eq!(roles["block_0/mlp/fc1/bias"], ParamRole::Bias);
    }

    #[test]
    fn canonical_plan_follows_both_rules() {
        let shapes = canonical();
        let roles = infer_roles(&shapes, &no_overrides()).unwrap();
        for n in [1, 2] {
            let (plan, warnings) = derive_plan(&roles, &shapes, n).unwrap();
            assert!(warnings.is_empty());
            for qkv in ["q", "k", "v"] {
                assert_eq!(plan.get(&format!("block_0/attn/{qkv}/kernel")), Some(Partition::Split(0)));
            }
            assert_eq!(plan.get("block_0/attn/o/kernel"), Some(Partition::Split(1)));
            assert_eq!(plan.get("block_0/mlp/fc1/kernel"), Some(Partition::Split(0)));
            assert_eq!(plan.get("block_0/mlp/fc2/kernel"), Some(Partition::Split(1)));
            assert_eq!(plan.get("block_0/mlp/fc1/bias"), Some(Partition::Replicated));
            assert!(validate_plan(&plan, &shapes, &roles).is_empty());
        }
    }

    #[test]
    fn indivisible_kernel_is_replicated_with_warning() {
        let shapes: Shapes = [
            ("mlp/fc1/kernel".to_string(), vec![10, 64]),
            ("mlp/fc2/kernel".to_string(), vec![64, 16]),
        ]
        .into_iter()
        .collect();
        let roles = infer_roles(&shapes, &no_overrides()).unwrap();
        let (plan, warnings) = derive_plan(&roles, &shapes, 4).unwrap();
        assert_eq!(plan.get("mlp/fc1/kernel"), Some(Partition::Replicated));
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("not divisible"));
    }

    #[test]
    fn too_many_shards_is_an_error() {
        let shapes = canonical();
        let roles = infer_roles(&shapes, &no_overrides()).unwrap();
        assert!(matches!(derive_plan(&roles, &shapes, 512), Err(PlanError::TooManyShards { .. })));
        assert!(matches!(derive_plan(&roles, &shapes, 0), Err(PlanError::ZeroShards)));
    }

    #[test]
    fn violations_are_reported() {
        let shapes = canonical();
        let roles = infer_roles(&shapes, &no_overrides()).unwrap();
        let (mut plan, _) = derive_plan(&roles, &shapes, 2).unwrap();
        plan.entries.insert("block_0/mlp/fc2/kernel".into(), Partition::Split(0));
        let v = validate_plan(&plan, &shapes, &roles);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("consecutive FC kernels share split dim"));

        plan.entries.insert("block_0/mlp/fc2/kernel".into(), Partition::Split(2));
        let v = validate_plan(&plan, &shapes, &roles);
        assert!(v.iter().any(|v| v.to_string().contains("dim out of range")));
    }

    #[test]
    fn overrides_win_and_conflicts_error() {
        let shapes = canonical();
        let mut ov = IndexMap::new();
        ov.insert("*/mlp/fc2/kernel".to_string(), ParamRole::Other);
        let roles = infer_roles(&shapes, &ov).unwrap();
        assert_eq!(roles["block_0/mlp/fc2/kernel"], ParamRole::Other);

        // A more specific pattern beats a broader one.
        ov.insert("block_0/mlp/fc2/kernel".to_string(), ParamRole::FullyConnected(1));
        let roles = infer_roles(&shapes, &ov).unwrap();
        assert_eq!(roles["block_0/mlp/fc2/kernel"], ParamRole::FullyConnected(1));

        let mut ov = IndexMap::new();
        ov.insert("block_0/attn/*".to_string(), ParamRole::Other);
        ov.insert("*attn/q/kernel".to_string(), ParamRole::Embedding);
        // 13 literal characters each.
        assert!(matches!(
            infer_roles(&shapes, &ov),
            Err(PlanError::ConflictingOverrides { .. })
        ));
    }

    #[test]
    fn alternative_naming_schemes() {
        let shapes: Shapes = [
            ("layers_0/self_attn/q_proj/weight", vec![8, 8]),
            ("layers_0/self_attn/qkv/weight", vec![24, 8]),
            ("layers_0/self_attn/out_proj/weight", vec![8, 8]),
            ("layers_0/ffn/dense_2/weight", vec![8, 32]),
            ("layers_0/ffn/dense_10/weight", vec![8, 8]),
            ("layers_0/ffn/dense_1/weight", vec![32, 8]),
            ("embeddings/word/weight", vec![50, 8]),
            ("lm_head/weight", vec![50, 8]),
            ("final_norm/weight", vec![8]),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect();
        let roles = infer_roles(&shapes, &no_overrides()).unwrap();
        let got: Vec<String> = roles.values().map(ToString::to_string).collect();
        assert_eq!(
            got,
            [
                "attention_qkv", "attention_qkv", "attention_out", "fc:1", "fc:2", "fc:0",
                "embedding", "other", "norm"
            ]
        );
    }

    #[test]
    fn fc_alternation_restarts_per_block() {
        let shapes: Shapes = (0..2)
            .flat_map(|b| {
                (1..=3).map(move |i| (format!("block_{b}/mlp/fc{i}/kernel"), vec![8, 8]))
            })
            .collect();
        let roles = infer_roles(&shapes, &no_overrides()).unwrap();
        let (plan, _) = derive_plan(&roles, &shapes, 2).unwrap();
        for b in 0..2 {
            assert_eq!(plan.get(&format!("block_{b}/mlp/fc1/kernel")), Some(Partition::Split(0)));
            assert_eq!(plan.get(&format!("block_{b}/mlp/fc2/kernel")), Some(Partition::Split(1)));
            assert_eq!(plan.get(&format!("block_{b}/mlp/fc3/kernel")), Some(Partition::Split(0)));
        }
    }

    #[test]
    fn text_round_trip_and_parse_errors() {
        let shapes = canonical();
        let roles = infer_roles(&shapes, &no_overrides()).unwrap();
        let (plan, _) = derive_plan(&roles, &shapes, 2).unwrap();
        let text = plan.to_text();
        assert!(text.starts_with("# n_shards=2\nblock_0/ln1/scale\treplicated\n"));
        assert_eq!(ShardingPlan::from_text(&text).unwrap(), plan);
        assert!(matches!(
            ShardingPlan::from_text("a\tsplit:x\n"),
            Err(PlanError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn glob_and_natural_order() {
        assert!(glob_match("*/attn/*", "block_3/attn/q/kernel"));
        assert!(glob_match("block_*", "block_"));
        assert!(!glob_match("block_*/q", "block_1/k"));
        assert_eq!(natural_cmp("fc2", "fc10"), Ordering::Less);
        assert_eq!(natural_cmp("fc02", "fc2"), Ordering::Equal);
    }

    #[test]
    fn memory_formula() {
        let shapes = canonical();
        let roles = infer_roles(&shapes, &no_overrides()).unwrap();
        let (plan, _) = derive_plan(&roles, &shapes, 4).unwrap();
        let (rep, split) = plan.element_split(&shapes);
        assert_eq!(split, 4 * 64 * 64 + 2 * 256 * 64);
        assert_eq!(rep, 64 + 64 + 256 + 64);
        assert_eq!(plan.per_device_elements(&shapes), rep + split / 4);
    }
}
