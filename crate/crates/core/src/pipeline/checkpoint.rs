//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SWCK" | version u32 | step u64
//! seed u64 | n_streams u32 | (name_len u32, name, counter u64)*
//! (name_len u32, name, dtype u8, rank u32, dims u64*rank, payload)*  until EOF
//! ```
//!
//! Record names are `params/<p>`, `adam_m/<p>` and `adam_v/<p>`. dtype codes:
//! 0 = f32, 1 = f64, 2 = i64. Tensors are stored gathered, so a checkpoint
//! can be loaded under any sharding plan.

use std::collections::BTreeMap;
use std::path::Path;

use super::{io_err, PipelineError, Result, RngStreams};
use crate::mesh::DeviceMesh;
use crate::params::ParamTree;
use crate::plan::ShardingPlan;
use crate::spmd::{gather_tree, shard_params, TrainState};
use crate::tensor::{DType, Tensor};

const MAGIC: &[u8; 4] = b"SWCK";
const VERSION: u32 = 1;
const GROUPS: [&str; 3] = ["params", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: RngStreams,
    pub params: ParamTree,
    pub adam_m: ParamTree,
    pub adam_v: ParamTree,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, rng: &RngStreams) -> Result<Self> {
        Ok(Self {
            step: state.step,
            rng: rng.clone(),
            params: gather_tree(&state.params)?,
            adam_m: gather_tree(&state.adam_m)?,
            adam_v: gather_tree(&state.adam_v)?,
        })
    }

    /// Reshards the stored tensors under `plan`.
    pub fn into_state(self, plan: &ShardingPlan, mesh: &DeviceMesh) -> Result<TrainState> {
        let mut state = shard_params(&self.params, plan, mesh, self.rng.seed)?;
        let moments = shard_params(&self.adam_m, plan, mesh, self.rng.seed)?;
        let second = shard_params(&self.adam_v, plan, mesh, self.rng.seed)?;
        state.adam_m = moments.params;
        state.adam_v = second.params;
        state.step = self.step;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&(self.rng.counters.len() as u32).to_le_bytes());
        for (name, counter) in &self.rng.counters {
            put_str(&mut out, name);
            out.extend_from_slice(&counter.to_le_bytes());
        }
        for (group, tree) in GROUPS.iter().zip([&self.params, &self.adam_m, &self.adam_v]) {
            for (name, t) in tree.iter() {
                put_str(&mut out, &format!("{group}/{name}"));
                out.push(match t.dtype() {
                    DType::F32 => 0,
                    DType::F64 => 1,
                    DType::I64 => 2,
                });
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    match t.dtype() {
                        DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                        DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                        DType::I64 => out.extend_from_slice(&(v as i64).to_le_bytes()),
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.corrupt_at(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.corrupt_at(4, &format!("unsupported version {version}")));
        }
        let step = r.u64("step")?;
        let seed = r.u64("rng seed")?;
        let n_streams = r.u32("stream count")?;
        let mut counters = BTreeMap::new();
        for _ in 0..n_streams {
            let name = r.string("stream name")?;
            counters.insert(name, r.u64("stream counter")?);
        }
        let mut trees = [ParamTree::new(), ParamTree::new(), ParamTree::new()];
        while r.pos < bytes.len() {
            let start = r.pos;
            let full = r.string("record name")?;
            let (group, name) = full
                .split_once('/')
                .ok_or_else(|| r.corrupt_at(start, &format!("record `{full}` has no group")))?;
            let g = GROUPS
                .iter()
                .position(|x| *x == group)
                .ok_or_else(|| r.corrupt_at(start, &format!("unknown record group `{group}`")))?;
            let code_at = r.pos;
            let dtype = match r.take(1, "dtype")?[0] {
                0 => DType::F32,
                1 => DType::F64,
                2 => DType::I64,
                c => return Err(r.corrupt_at(code_at, &format!("unknown dtype code {c}"))),
            };
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let payload_at = r.pos;
            let payload = r.take(n.saturating_mul(width), "payload")?;
            let data = payload
                .chunks_exact(width)
                .map(|c| match dtype {
                    DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                    DType::I64 => i64::from_le_bytes(c.try_into().unwrap()) as f64,
                })
                .collect();
            let t = Tensor::new(shape, data, dtype)
                .map_err(|e| r.corrupt_at(payload_at, &e.to_string()))?;
            trees[g].insert(name, t);
        }
        let [params, adam_m, adam_v] = trees;
        Ok(Self {
            step,
            rng: RngStreams { seed, counters },
            params,
            adam_m,
            adam_v,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt_at(&self, offset: usize, msg: &str) -> PipelineError {
        PipelineError::Corrupt {
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.corrupt_at(self.pos, &format!("truncated {what}")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt_at(at, &format!("{what} is not UTF-8")))
    }
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}
