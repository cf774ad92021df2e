//! Mesh setup and sharding-rule derivation for a run.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::{io_err, PipelineError, Result, RngStreams};
use crate::mesh::DeviceMesh;
use crate::params::ParamTree;
use crate::plan::{plan_for, ParamRole, ShardingPlan};

/// Physical layout of the simulated cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshConfig {
    pub n_hosts: usize,
    pub devices_per_host: usize,
}

impl MeshConfig {
    pub fn single_host(devices: usize) -> Self {
        Self {
            n_hosts: 1,
            devices_per_host: devices,
        }
    }

    pub fn n_devices(&self) -> usize {
        self.n_hosts * self.devices_per_host
    }
}

/// Owns the mesh and the global seed. The number of model shards fixes the
/// mp axis; the remaining devices form the dp axis.
#[derive(Debug, Clone)]
pub struct Deployer {
    mesh: DeviceMesh,
    seed: u64,
    workdir: Option<PathBuf>,
}

impl Deployer {
    pub fn setup(mesh: MeshConfig, n_model_shards: usize, seed: u64, workdir: Option<&Path>) -> Result<Self> {
        let devices = mesh.n_devices();
        if n_model_shards == 0 || devices == 0 {
            return Err(PipelineError::Config(
                "the mesh needs at least one device and one model shard".into(),
            ));
        }
        if n_model_shards > devices {
            return Err(PipelineError::Config(format!(
                "n_model_shards={n_model_shards} exceeds the {devices} devices of the mesh"
            )));
        }
        if !devices.is_multiple_of(n_model_shards) {
            return Err(PipelineError::Config(format!(
                "{devices} devices cannot be divided into groups of n_model_shards={n_model_shards}"
            )));
        }
        let dp = devices / n_model_shards;
        let mesh = DeviceMesh::build(mesh.n_hosts, mesh.devices_per_host, dp, n_model_shards)?;
        if let Some(dir) = workdir {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        log::info!(
            "mesh: {} host(s) x {} device(s), dp={dp} mp={n_model_shards}",
            mesh.n_hosts(),
            mesh.devices_per_host()
        );
        Ok(Self {
            mesh,
            seed,
            workdir: workdir.map(Path::to_path_buf),
        })
    }

    pub fn mesh(&self) -> &DeviceMesh {
        &self.mesh
    }

    pub fn dp_size(&self) -> usize {
        self.mesh.dp_size()
    }

    pub fn mp_size(&self) -> usize {
        self.mesh.mp_size()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh `train`, `predict` and `shuffle` streams from the global seed.
    pub fn rng_streams(&self) -> RngStreams {
        RngStreams::new(self.seed)
    }

    pub fn workdir(&self) -> Option<&Path> {
        self.workdir.as_deref()
    }

    /// Derives the plan for `params` over the mp axis. Heuristic warnings
    /// are logged.
    pub fn get_sharding_rules(
        &self,
        params: &ParamTree,
        overrides: &IndexMap<String, ParamRole>,
    ) -> Result<ShardingPlan> {
        let (_, plan, warnings) = plan_for(params, overrides, self.mp_size())?;
        for w in warnings {
            log::warn!("{w}");
        }
        Ok(plan)
    }
}
