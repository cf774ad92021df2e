//! Command-line arguments and the work behind each subcommand. `main` only
//! parses, prints and picks exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use shardwise::audit::{run_audit, AuditConfig, AuditReport, PlanChoice};
use shardwise::mesh::shard_numel;
use shardwise::pipeline::{
    load_checkpoint, Deployer, MeshConfig, Predictor, RunConfig, RunSummary, Trainer,
};
use shardwise::plan::{infer_roles, plan_for, ShardingPlan};
use shardwise::{DType, ParamTree, Partition};

use crate::examples::{CharLm, Example, ExampleName, MamlSinusoid, Seq2SeqCopy};
use crate::spec_file::ModelSpec;

#[derive(Debug, Parser)]
#[command(name = "shardwise", version, about = "Tensor-parallel sharding plans, audits and example pipelines")]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive a sharding plan for a model spec.
    Plan(PlanArgs),
    /// Compare sharded training against the single-device reference.
    Audit(AuditArgs),
    /// Train a shipped example.
    Train(TrainArgs),
    /// Run a shipped example's predictor from a checkpoint.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Split every sharded kernel along dimension 0.
    SameDim,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    /// Model spec file (`key = value` lines).
    pub spec: PathBuf,
    #[arg(long)]
    pub n_shards: usize,
    #[arg(long, default_value = "shardwise-out")]
    pub workdir: PathBuf,
    /// Plan file path; defaults to `<workdir>/plan.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    /// Model spec file; the default toy model when omitted.
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub mp: usize,
    #[arg(long, default_value_t = 1)]
    pub dp: usize,
    #[arg(long, default_value_t = 1)]
    pub n_hosts: usize,
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,
    /// AdamW steps before comparing parameters.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub global_batch: usize,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use this plan file instead of deriving one.
    #[arg(long, conflicts_with = "baseline")]
    pub plan: Option<PathBuf>,
    /// Replace the rule-based plan by a baseline.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long, default_value = "shardwise-out")]
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub example: ExampleName,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub n_epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub dp: usize,
    #[arg(long, alias = "n-model-shards", default_value_t = 1)]
    pub mp: usize,
    #[arg(long, default_value_t = 1)]
    pub n_hosts: usize,
    #[arg(long, conflicts_with = "global_batch_size")]
    pub per_device_batch_size: Option<usize>,
    /// Examples per micro-batch across all replicas; divided by `--dp`.
    #[arg(long)]
    pub global_batch_size: Option<usize>,
    #[arg(long)]
    pub eval_per_device_batch_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub accumulate_grad_batches: usize,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub warmup_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    pub dtype: Option<DTypeArg>,
    #[arg(long, default_value = "shardwise-out")]
    pub workdir: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub save_argmax_ckpt_by_metrics: Vec<String>,
    /// Metrics from `--save-argmax-ckpt-by-metrics` where lower is better.
    #[arg(long, value_delimiter = ',')]
    pub lower_is_better: Vec<String>,
    /// Stop after this many steps, keeping the full schedule.
    #[arg(long)]
    pub stop_after_steps: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Skip per-epoch evaluation.
    #[arg(long)]
    pub no_eval: bool,
    /// Fail on non-finite values inside ops.
    #[arg(long)]
    pub checked: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(value_enum)]
    pub example: ExampleName,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One input per line; the example's evaluation set when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub dp: usize,
    #[arg(long, alias = "n-model-shards", default_value_t = 1)]
    pub mp: usize,
    #[arg(long, default_value_t = 1)]
    pub n_hosts: usize,
    #[arg(long)]
    pub per_device_batch_size: Option<usize>,
    #[arg(long, default_value = "shardwise-out")]
    pub workdir: PathBuf,
}

fn mesh_config(n_hosts: usize, dp: usize, mp: usize) -> anyhow::Result<MeshConfig> {
    let devices = dp * mp;
    if n_hosts == 0 || devices == 0 || !devices.is_multiple_of(n_hosts) {
        bail!("{devices} devices (dp={dp} x mp={mp}) cannot be spread evenly over {n_hosts} hosts");
    }
    Ok(MeshConfig {
        n_hosts,
        devices_per_host: devices / n_hosts,
    })
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ── plan ─────────────────────────────────────────────────────────────────────

pub struct PlanOutcome {
    pub plan: ShardingPlan,
    pub plan_path: PathBuf,
    /// Per-tensor shard sizes and the per-device memory summary.
    pub summary: String,
    pub per_device_elements: usize,
    pub total_elements: usize,
}

pub fn plan(args: &PlanArgs) -> anyhow::Result<PlanOutcome> {
    let spec = ModelSpec::load(&args.spec)?;
    let shapes = spec.model.shapes();
    let params: ParamTree = shapes
        .iter()
        .map(|(n, s)| (n.clone(), shardwise::Tensor::zeros(s, DType::F32)))
        .collect();
    let (roles, plan, warnings) = plan_for(&params, &spec.overrides, args.n_shards)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let plan_path = args.out.clone().unwrap_or_else(|| args.workdir.join("plan.txt"));
    write(&plan_path, &plan.to_text())?;

    let n = args.n_shards;
    let mut s = String::new();
    writeln!(s, "tensor\trole\tpartition\tglobal_shape\tshard_shape\tshard_elements")?;
    for (name, shape) in &shapes {
        let part = plan.get(name).unwrap_or(Partition::Replicated);
        let mut shard = shape.clone();
        if let Partition::Split(d) = part {
            shard[d] /= n;
        }
        let role = roles.get(name).map_or("-".to_string(), ToString::to_string);
        writeln!(
            s,
            "{name}\t{role}\t{part}\t{shape:?}\t{shard:?}\t{}",
            shard_numel(shape, part, n)
        )?;
    }
    let (rep, split) = plan.element_split(&shapes);
    let per_device = plan.per_device_elements(&shapes);
    let total = rep + split;
    writeln!(s, "n_shards={n}")?;
    writeln!(s, "replicated_elements={rep}")?;
    writeln!(s, "split_elements={split}")?;
    writeln!(s, "full_model_elements={total}")?;
    writeln!(s, "params_per_device={per_device}")?;
    writeln!(s, "params_and_adamw_state_per_device={}", 3 * per_device)?;
    write(&args.workdir.join("plan_summary.tsv"), &s)?;
    Ok(PlanOutcome {
        plan,
        plan_path,
        summary: s,
        per_device_elements: per_device,
        total_elements: total,
    })
}

// ── audit ────────────────────────────────────────────────────────────────────

pub fn audit_config(args: &AuditArgs) -> anyhow::Result<AuditConfig> {
    let spec = match &args.spec {
        Some(p) => ModelSpec::load(p)?,
        None => ModelSpec::default(),
    };
    if args.seq_len > spec.model.max_seq_len {
        bail!(
            "--seq-len {} exceeds the model's max_seq_len {}",
            args.seq_len,
            spec.model.max_seq_len
        );
    }
    let plan_override = match &args.plan {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let plan = ShardingPlan::from_text(&text)?;
            let roles = infer_roles(&spec.model.shapes(), &spec.overrides)?;
            let problems = shardwise::plan::validate_plan(&plan, &spec.model.shapes(), &roles);
            for v in &problems {
                log::warn!("plan {}: {v}", p.display());
            }
            Some(plan)
        }
        None => None,
    };
    Ok(AuditConfig {
        model: spec.model,
        n_hosts: args.n_hosts,
        dp: args.dp,
        mp: args.mp,
        dtype: args.dtype.into(),
        steps: args.steps,
        global_batch: args.global_batch,
        seq_len: args.seq_len,
        seed: args.seed,
        plan: match args.baseline {
            Some(Baseline::SameDim) => PlanChoice::SameDim,
            None => PlanChoice::Rules,
        },
        plan_override,
        role_overrides: spec.overrides,
        ..AuditConfig::default()
    })
}

pub fn audit(args: &AuditArgs) -> anyhow::Result<AuditReport> {
    let cfg = audit_config(args)?;
    let report = run_audit(&cfg)?;
    write(&args.workdir.join("comm_report.csv"), &report.comm.to_csv())?;
    write(&args.workdir.join("audit.txt"), &render_audit(args, &report))?;
    Ok(report)
}

pub fn render_audit(args: &AuditArgs, r: &AuditReport) -> String {
    let worst = r.worst();
    let mut s = String::new();
    let plan = if args.plan.is_some() {
        "file"
    } else if args.baseline.is_some() {
        "same-dim"
    } else {
        "rules"
    };
    let _ = writeln!(
        s,
        "mesh: hosts={} dp={} mp={} dtype={:?} steps={} plan={plan}",
        args.n_hosts, args.dp, args.mp, args.dtype, args.steps
    );
    let _ = writeln!(s, "loss: reference={} sharded={}", r.loss_reference, r.loss_sharded);
    let _ = writeln!(
        s,
        "max relative deviation: loss={:e} grads={:e} params={:e} (tolerance {:e})",
        r.max_loss_dev(),
        r.max_grad_dev(),
        r.max_param_dev(),
        r.tolerance
    );
    let _ = writeln!(s, "worst: {} = {:e}", worst.name, worst.value);
    let _ = writeln!(s, "{}", if r.passed() { "PASS" } else { "FAIL" });
    s.push_str(&r.comm.to_csv());
    s
}

// ── train ────────────────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub summary: RunSummary,
    /// Lines this invocation appended to `run.log`.
    pub log_lines: Vec<String>,
    pub params: ParamTree,
    pub debug_trace: Vec<String>,
    pub workdir: PathBuf,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.summary.losses.last().map(|l| l.1)
    }
}

pub fn run_config<X: Example>(x: &X, args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut c = x.defaults();
    c.seed = args.seed;
    if let Some(s) = args.steps {
        c.max_steps = Some(s);
    }
    if let Some(e) = args.n_epochs {
        c.n_epochs = e;
    }
    if let Some(b) = args.per_device_batch_size {
        c.per_device_batch_size = b;
    }
    if let Some(g) = args.global_batch_size {
        if g % args.dp != 0 {
            bail!("--global-batch-size {g} is not divisible by --dp {}", args.dp);
        }
        c.per_device_batch_size = g / args.dp;
    }
    if let Some(b) = args.eval_per_device_batch_size {
        c.eval_per_device_batch_size = b;
    }
    c.accumulate_grad_batches = args.accumulate_grad_batches;
    if let Some(v) = args.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = args.warmup_rate {
        c.warmup_rate = v;
    }
    if let Some(v) = args.weight_decay {
        c.weight_decay = v;
    }
    if let Some(d) = args.dtype {
        c.dtype = d.into();
    }
    c.workdir = Some(args.workdir.clone());
    if !args.save_argmax_ckpt_by_metrics.is_empty() {
        c.save_argmax_ckpt_by_metrics = args.save_argmax_ckpt_by_metrics.clone();
    }
    c.lower_is_better = args.lower_is_better.clone();
    c.stop_after_steps = args.stop_after_steps;
    c.checked = args.checked;
    c.validate()?;
    Ok(c)
}

pub fn train(args: &TrainArgs) -> anyhow::Result<TrainOutcome> {
    match args.example {
        ExampleName::CharLm => train_example(&CharLm::new(), args),
        ExampleName::Seq2seqCopy => train_example(&Seq2SeqCopy, args),
        ExampleName::MamlSinusoid => train_example(&MamlSinusoid, args),
    }
}

pub fn train_example<X: Example>(x: &X, args: &TrainArgs) -> anyhow::Result<TrainOutcome> {
    let config = run_config(x, args)?;
    let mesh = mesh_config(args.n_hosts, args.dp, args.mp)?;
    std::fs::create_dir_all(&args.workdir).with_context(|| format!("creating {}", args.workdir.display()))?;
    if args.resume.is_none() {
        let log = args.workdir.join("run.log");
        if log.exists() {
            std::fs::remove_file(&log).with_context(|| format!("removing {}", log.display()))?;
        }
    }
    let trace = x.debug_trace()?;
    for line in &trace {
        log::debug!("{line}");
    }
    if !trace.is_empty() {
        write(&args.workdir.join("debug_trace.txt"), &(trace.join("\n") + "\n"))?;
    }

    let seed = match &args.resume {
        Some(p) => load_checkpoint(p)?.rng.seed,
        None => args.seed,
    };
    let deployer = Deployer::setup(mesh, args.mp, seed, Some(&args.workdir))?;
    let config = RunConfig { seed, ..config };
    let overrides = IndexMap::new();
    let mut trainer = match &args.resume {
        Some(p) => Trainer::from_checkpoint(&deployer, x.spec(), config, load_checkpoint(p)?, &overrides)?,
        None => {
            let params = x.init_params(seed, config.dtype)?;
            Trainer::new(&deployer, x.spec(), config, &params, &overrides)?
        }
    };
    let (train_set, eval_set) = x.datasets();
    let eval = if args.no_eval { None } else { Some(eval_set.as_slice()) };
    let summary = trainer.fit(&train_set, eval)?;
    Ok(TrainOutcome {
        summary,
        log_lines: trainer.log_lines().to_vec(),
        params: trainer.params()?,
        debug_trace: trace,
        workdir: args.workdir.clone(),
    })
}

// ── predict ──────────────────────────────────────────────────────────────────

pub fn predict(args: &PredictArgs) -> anyhow::Result<Vec<String>> {
    match args.example {
        ExampleName::CharLm => predict_example(&CharLm::new(), args),
        ExampleName::Seq2seqCopy => predict_example(&Seq2SeqCopy, args),
        ExampleName::MamlSinusoid => predict_example(&MamlSinusoid, args),
    }
}

pub fn predict_example<X: Example>(x: &X, args: &PredictArgs) -> anyhow::Result<Vec<String>> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut rng = ckpt.rng.clone();
    let deployer = Deployer::setup(
        mesh_config(args.n_hosts, args.dp, args.mp)?,
        args.mp,
        rng.seed,
        Some(&args.workdir),
    )?;
    let plan = deployer.get_sharding_rules(&ckpt.params, &IndexMap::new())?;
    let state = ckpt.into_state(&plan, deployer.mesh())?;
    let examples = match &args.input {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| x.parse_input(l))
            .collect::<anyhow::Result<Vec<_>>>()?,
        None => x.datasets().1,
    };
    let spec = x.spec();
    let batch = args
        .per_device_batch_size
        .unwrap_or_else(|| x.defaults().eval_per_device_batch_size);
    let outputs = Predictor::new(&deployer, &spec).predict(&state, &examples, batch, &mut rng)?;
    let lines: Vec<String> = examples.iter().zip(&outputs).map(|(e, o)| x.render(e, o)).collect();
    let mut text = lines.join("\n");
    text.push('\n');
    write(&args.workdir.join("predictions.txt"), &text)?;
    Ok(lines)
}
