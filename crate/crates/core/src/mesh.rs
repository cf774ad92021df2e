//! Simulated device mesh with deterministic collectives and byte accounting.
//!
//! Devices are numbered `dp_rank * mp_size + mp_rank`, so the model-parallel
//! axis is innermost and a model-parallel group occupies consecutive device
//! ids. Hosts own contiguous blocks of `devices_per_host` ids.
//!
//! Traffic is modeled with the ring algorithm: a collective over `n` devices
//! splits its payload into `n` chunks and every device forwards `n − 1` chunks
//! per phase to its ring successor. All-reduce runs two phases
//! (reduce-scatter then all-gather), so each device sends `2·(n−1)/n` of the
//! payload. These are the usual bandwidth-optimal formulas; latency is not
//! modeled. A hop counts as inter-host when the two ring neighbors sit on
//! different hosts.
//!
//! Sums are always taken in ascending device order so results are
//! bit-reproducible (a real ring reduces in a rotating order).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::tensor::{numel, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error(
        "inconsistent mesh: {n_hosts} hosts × {devices_per_host} devices/host \
         does not equal dp {dp_size} × mp {mp_size}"
    )]
    Inconsistent {
        n_hosts: usize,
        devices_per_host: usize,
        dp_size: usize,
        mp_size: usize,
    },
    #[error("{collective}: shard shapes differ within the group ({first:?} vs {other:?})")]
    ShapeMismatch {
        collective: Collective,
        first: Vec<usize>,
        other: Vec<usize>,
    },
    #[error("{collective}: expected {expected} inputs for the group, got {got}")]
    GroupSize {
        collective: Collective,
        expected: usize,
        got: usize,
    },
    #[error("{collective}: dimension {dim} out of range for rank {rank}")]
    DimOutOfRange {
        collective: Collective,
        dim: usize,
        rank: usize,
    },
    #[error("{collective}: input must be split, got replicated")]
    NotSplit { collective: Collective },
    #[error("device {0} is not part of the mesh")]
    UnknownDevice(usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MeshError> = std::result::Result<T, E>;

// ── Partitions and sharded tensors ──────────────────────────────────────────

/// How a tensor is laid out across a device group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Replicated,
    Split(usize),
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Replicated => f.write_str("replicated"),
            Partition::Split(d) => write!(f, "split:{d}"),
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "replicated" => Ok(Partition::Replicated),
            _ => s
                .strip_prefix("split:")
                .and_then(|d| d.parse().ok())
                .map(Partition::Split)
                .ok_or_else(|| format!("bad partition `{s}` (expected replicated or split:<dim>)")),
        }
    }
}

/// One tensor per device of a group.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedTensor {
    global_shape: Vec<usize>,
    partition: Partition,
    shards: Vec<Tensor>,
}

impl ShardedTensor {
    /// Splits `t` evenly over `n` devices (or replicates it).
    pub fn shard(t: &Tensor, partition: Partition, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(MeshError::Invalid("cannot shard over zero devices".into()));
        }
        let shards = match partition {
            Partition::Replicated => vec![t.clone(); n],
            Partition::Split(d) => t.split(d, n)?,
        };
        Ok(Self {
            global_shape: t.shape().to_vec(),
            partition,
            shards,
        })
    }

    /// Wraps existing shards after checking the layout invariants.
    pub fn from_shards(partition: Partition, shards: Vec<Tensor>) -> Result<Self> {
        let first = shards
            .first()
            .ok_or_else(|| MeshError::Invalid("no shards".into()))?;
        let mut global_shape = first.shape().to_vec();
        match partition {
            Partition::Replicated => {
                if let Some(bad) = shards.iter().find(|s| !s.bit_eq(first)) {
                    return Err(MeshError::Invalid(format!(
                        "replicated shards differ (shape {:?})",
                        bad.shape()
                    )));
                }
            }
            Partition::Split(d) => {
                if d >= first.rank() {
                    return Err(MeshError::DimOutOfRange {
                        collective: Collective::AllGather,
                        dim: d,
                        rank: first.rank(),
                    });
                }
                for s in &shards {
                    let same = s.rank() == first.rank()
                        && (0..s.rank()).all(|i| i == d || s.shape()[i] == first.shape()[i]);
                    if !same {
                        return Err(MeshError::ShapeMismatch {
                            collective: Collective::AllGather,
                            first: first.shape().to_vec(),
                            other: s.shape().to_vec(),
                        });
                    }
                }
                global_shape[d] = shards.iter().map(|s| s.shape()[d]).sum();
            }
        }
        Ok(Self {
            global_shape,
            partition,
            shards,
        })
    }

    pub fn global_shape(&self) -> &[usize] {
        &self.global_shape
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn shards(&self) -> &[Tensor] {
        &self.shards
    }

    pub fn shard_of(&self, index: usize) -> &Tensor {
        &self.shards[index]
    }

    pub fn into_shards(self) -> Vec<Tensor> {
        self.shards
    }

    /// Reassembles the global tensor locally (no communication is modeled).
    pub fn gather(&self) -> Result<Tensor> {
        match self.partition {
            Partition::Replicated => Ok(self.shards[0].clone()),
            Partition::Split(d) => {
                let refs: Vec<&Tensor> = self.shards.iter().collect();
                Ok(Tensor::concat(&refs, d)?)
            }
        }
    }
}

// ── Accounting ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Collective {
    AllReduce,
    AllGather,
    ReduceScatter,
}

impl Collective {
    pub const ALL: [Collective; 3] = [
        Collective::AllReduce,
        Collective::AllGather,
        Collective::ReduceScatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Collective::AllReduce => "all_reduce",
            Collective::AllGather => "all_gather",
            Collective::ReduceScatter => "reduce_scatter",
        }
    }
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One executed collective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommEvent {
    pub collective: Collective,
    pub group: Vec<usize>,
    pub payload_bytes: u64,
    /// Bytes sent by each group member, in group order.
    pub sent_bytes: Vec<u64>,
    pub intra_host_bytes: u64,
    pub inter_host_bytes: u64,
}

impl CommEvent {
    pub fn wire_bytes(&self) -> u64 {
        self.sent_bytes.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollectiveStats {
    pub count: u64,
    pub payload_bytes: u64,
    pub wire_bytes: u64,
    pub intra_host_bytes: u64,
    pub inter_host_bytes: u64,
}

/// Totals per collective kind.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommReport {
    pub by_kind: BTreeMap<Collective, CollectiveStats>,
}

impl CommReport {
    pub fn get(&self, c: Collective) -> CollectiveStats {
        self.by_kind.get(&c).copied().unwrap_or_default()
    }

    pub fn total(&self) -> CollectiveStats {
        self.by_kind
            .values()
            .fold(CollectiveStats::default(), |mut acc, s| {
                acc.count += s.count;
                acc.payload_bytes += s.payload_bytes;
                acc.wire_bytes += s.wire_bytes;
                acc.intra_host_bytes += s.intra_host_bytes;
                acc.inter_host_bytes += s.inter_host_bytes;
                acc
            })
    }

    /// Per-kind difference `self − earlier`, for measuring a program region.
    pub fn since(&self, earlier: &CommReport) -> CommReport {
        let by_kind = Collective::ALL
            .iter()
            .map(|&c| {
                let (a, b) = (self.get(c), earlier.get(c));
                (
                    c,
                    CollectiveStats {
                        count: a.count - b.count,
                        payload_bytes: a.payload_bytes - b.payload_bytes,
                        wire_bytes: a.wire_bytes - b.wire_bytes,
                        intra_host_bytes: a.intra_host_bytes - b.intra_host_bytes,
                        inter_host_bytes: a.inter_host_bytes - b.inter_host_bytes,
                    },
                )
            })
            .filter(|(_, s)| s.count > 0)
            .collect();
        CommReport { by_kind }
    }

    /// CSV with one row per collective kind (all kinds, zero rows included).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("collective,count,payload_bytes,wire_bytes,intra_host_bytes,inter_host_bytes\n");
        for c in Collective::ALL {
            let s = self.get(c);
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.name(),
                s.count,
                s.payload_bytes,
                s.wire_bytes,
                s.intra_host_bytes,
                s.inter_host_bytes
            ));
        }
        out
    }
}

#[derive(Debug, Default)]
struct Ledger {
    events: Vec<CommEvent>,
    report: CommReport,
}

// ── Mesh ─────────────────────────────────────────────────────────────────────

/// A dp × mp grid of simulated devices grouped into hosts.
///
/// Cloning shares the traffic ledger, so collectives issued through any clone
/// are accounted together.
#[derive(Debug, Clone)]
pub struct DeviceMesh {
    n_hosts: usize,
    devices_per_host: usize,
    dp_size: usize,
    mp_size: usize,
    ledger: Arc<Mutex<Ledger>>,
}

impl DeviceMesh {
    pub fn build(
        n_hosts: usize,
        devices_per_host: usize,
        dp_size: usize,
        mp_size: usize,
    ) -> Result<Self> {
        let positive = n_hosts > 0 && devices_per_host > 0 && dp_size > 0 && mp_size > 0;
        if !positive || n_hosts * devices_per_host != dp_size * mp_size {
            return Err(MeshError::Inconsistent {
                n_hosts,
                devices_per_host,
                dp_size,
                mp_size,
            });
        }
        Ok(Self {
            n_hosts,
            devices_per_host,
            dp_size,
            mp_size,
            ledger: Arc::default(),
        })
    }

    /// A single-host mesh.
    pub fn single_host(dp_size: usize, mp_size: usize) -> Result<Self> {
        Self::build(1, dp_size * mp_size, dp_size, mp_size)
    }

    pub fn n_hosts(&self) -> usize {
        self.n_hosts
    }

    pub fn devices_per_host(&self) -> usize {
        self.devices_per_host
    }

    pub fn dp_size(&self) -> usize {
        self.dp_size
    }

    pub fn mp_size(&self) -> usize {
        self.mp_size
    }

    pub fn n_devices(&self) -> usize {
        self.dp_size * self.mp_size
    }

    pub fn device_id(&self, dp_rank: usize, mp_rank: usize) -> usize {
        dp_rank * self.mp_size + mp_rank
    }

    pub fn host_of(&self, device: usize) -> usize {
        device / self.devices_per_host
    }

    pub fn hosts(&self) -> Vec<Vec<usize>> {
        (0..self.n_hosts)
            .map(|h| (h * self.devices_per_host..(h + 1) * self.devices_per_host).collect())
            .collect()
    }

    /// Devices sharing one model replica.
    pub fn mp_group(&self, dp_rank: usize) -> Vec<usize> {
        (0..self.mp_size).map(|m| self.device_id(dp_rank, m)).collect()
    }

    /// Devices holding the same model shard across data-parallel replicas.
    pub fn dp_group(&self, mp_rank: usize) -> Vec<usize> {
        (0..self.dp_size).map(|d| self.device_id(d, mp_rank)).collect()
    }

    pub fn report(&self) -> CommReport {
        self.ledger.lock().expect("ledger poisoned").report.clone()
    }

    pub fn events(&self) -> Vec<CommEvent> {
        self.ledger.lock().expect("ledger poisoned").events.clone()
    }

    fn check_group(&self, group: &[usize]) -> Result<()> {
        if group.is_empty() {
            return Err(MeshError::Invalid("empty device group".into()));
        }
        match group.iter().find(|&&d| d >= self.n_devices()) {
            Some(&d) => Err(MeshError::UnknownDevice(d)),
            None => Ok(()),
        }
    }

    /// Records a ring collective in which group member `i` forwards
    /// `sent_elems[i]` elements to member `i + 1 (mod n)`.
    fn record(
        &self,
        collective: Collective,
        group: &[usize],
        payload_bytes: u64,
        sent_elems: Vec<usize>,
        elem_bytes: usize,
    ) {
        let n = group.len();
        let sent_bytes: Vec<u64> = sent_elems.iter().map(|&e| (e * elem_bytes) as u64).collect();
        let (mut intra, mut inter) = (0u64, 0u64);
        for (i, &bytes) in sent_bytes.iter().enumerate() {
            let (src, dst) = (group[i], group[(i + 1) % n]);
            if self.host_of(src) == self.host_of(dst) {
                intra += bytes;
            } else {
                inter += bytes;
            }
        }
        let event = CommEvent {
            collective,
            group: group.to_vec(),
            payload_bytes,
            sent_bytes,
            intra_host_bytes: intra,
            inter_host_bytes: inter,
        };
        let mut ledger = self.ledger.lock().expect("ledger poisoned");
        let stats = ledger.report.by_kind.entry(collective).or_default();
        stats.count += 1;
        stats.payload_bytes += payload_bytes;
        stats.wire_bytes += event.wire_bytes();
        stats.intra_host_bytes += intra;
        stats.inter_host_bytes += inter;
        ledger.events.push(event);
    }

    fn same_shapes(collective: Collective, xs: &[Tensor]) -> Result<()> {
        let first = &xs[0];
        match xs.iter().find(|x| x.shape() != first.shape()) {
            Some(bad) => Err(MeshError::ShapeMismatch {
                collective,
                first: first.shape().to_vec(),
                other: bad.shape().to_vec(),
            }),
            None => Ok(()),
        }
    }

    fn expect_len(collective: Collective, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(MeshError::GroupSize {
                collective,
                expected,
                got,
            });
        }
        Ok(())
    }

    /// Elementwise sum over the group, delivered to every member.
    pub fn all_reduce(&self, inputs: &[Tensor], group: &[usize]) -> Result<Vec<Tensor>> {
        let c = Collective::AllReduce;
        self.check_group(group)?;
        Self::expect_len(c, group.len(), inputs.len())?;
        Self::same_shapes(c, inputs)?;
        let n = group.len();
        if n == 1 {
            return Ok(inputs.to_vec());
        }
        let mut acc = inputs[0].clone();
        for x in &inputs[1..] {
            acc = crate::tensor::kernels::add(&acc, x)?;
        }
        let elems = inputs[0].numel();
        let chunks = ring_chunks(elems, n);
        // Reduce-scatter phase: member i sends every chunk except (i+1) mod n;
        // all-gather phase: every chunk except (i+2) mod n.
        let sent = (0..n)
            .map(|i| (elems - chunks[(i + 1) % n]) + (elems - chunks[(i + 2) % n]))
            .collect();
        self.record(
            c,
            group,
            inputs[0].size_bytes() as u64,
            sent,
            inputs[0].dtype().size_bytes(),
        );
        Ok(vec![acc; n])
    }

    /// Concatenates the split shards; every member receives the full tensor.
    pub fn all_gather(&self, x: &ShardedTensor, group: &[usize]) -> Result<Vec<Tensor>> {
        let c = Collective::AllGather;
        self.check_group(group)?;
        let Partition::Split(d) = x.partition() else {
            return Err(MeshError::NotSplit { collective: c });
        };
        Self::expect_len(c, group.len(), x.shards().len())?;
        let rank = x.global_shape().len();
        if d >= rank {
            return Err(MeshError::DimOutOfRange {
                collective: c,
                dim: d,
                rank,
            });
        }
        let full = x.gather()?;
        let n = group.len();
        if n > 1 {
            let sizes: Vec<usize> = x.shards().iter().map(|s| s.numel()).collect();
            let total = full.numel();
            // Member i forwards every shard except its successor's.
            let sent = (0..n).map(|i| total - sizes[(i + 1) % n]).collect();
            self.record(
                c,
                group,
                full.size_bytes() as u64,
                sent,
                full.dtype().size_bytes(),
            );
        }
        Ok(vec![full; n])
    }

    /// Sums over the group and leaves member `i` with slice `i` along `dim`.
    pub fn reduce_scatter(
        &self,
        inputs: &[Tensor],
        group: &[usize],
        dim: usize,
    ) -> Result<ShardedTensor> {
        let c = Collective::ReduceScatter;
        self.check_group(group)?;
        Self::expect_len(c, group.len(), inputs.len())?;
        Self::same_shapes(c, inputs)?;
        let rank = inputs[0].rank();
        if dim >= rank {
            return Err(MeshError::DimOutOfRange {
                collective: c,
                dim,
                rank,
            });
        }
        let n = group.len();
        let mut acc = inputs[0].clone();
        for x in &inputs[1..] {
            acc = crate::tensor::kernels::add(&acc, x)?;
        }
        let out = ShardedTensor::shard(&acc, Partition::Split(dim), n)?;
        if n > 1 {
            let total = acc.numel();
            // Member i forwards every chunk except the one it ends up owning.
            let sent = (0..n).map(|i| total - out.shards()[i].numel()).collect();
            self.record(
                c,
                group,
                acc.size_bytes() as u64,
                sent,
                acc.dtype().size_bytes(),
            );
        }
        Ok(out)
    }
}

/// Element counts of the `n` ring chunks of a payload, as even as possible.
fn ring_chunks(elems: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| elems / n + usize::from(i < elems % n))
        .collect()
}

/// Per-device element count for a tensor of `shape` laid out with `partition`
/// over `n` devices.
pub fn shard_numel(shape: &[usize], partition: Partition, n: usize) -> usize {
    match partition {
        Partition::Replicated => numel(shape),
        Partition::Split(_) => numel(shape) / n,
    }
}
