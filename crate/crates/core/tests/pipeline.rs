//! Trainer, predictor and checkpoint behavior on a tiny language model.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shardwise::model::{forward, lm_loss, TransformerConfig};
use shardwise::pipeline::{
    load_checkpoint, Batch, Deployer, MeshConfig, PipelineError, PipelineSpec, Predictor, RngStreams, RunConfig,
    Trainer,
};
use shardwise::spmd::gather_tree;
use shardwise::{DType, ParamTree, Partition, Tensor};

const T: usize = 6;

fn cfg() -> TransformerConfig {
    TransformerConfig {
        vocab_size: 12,
        n_layers: 1,
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        max_seq_len: T,
        tie_embeddings: true,
    }
}

/// Sequences of `T + 1` tokens counting upwards modulo the vocabulary.
fn dataset(n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let start = rng.random_range(0..12);
            (0..=T).map(|i| (start + i) % 12).collect()
        })
        .collect()
}

fn collate(examples: &[Vec<usize>]) -> shardwise::pipeline::Result<Batch> {
    let b = examples.len();
    let t = examples[0].len() - 1;
    let ids: Vec<usize> = examples.iter().flat_map(|e| e[..t].to_vec()).collect();
    let labels: Vec<usize> = examples.iter().flat_map(|e| e[1..].to_vec()).collect();
    let mut batch = Batch::new();
    batch.insert("ids".into(), Tensor::from_indices(&[b, t], &ids)?);
    batch.insert("labels".into(), Tensor::from_indices(&[b, t], &labels)?);
    Ok(batch)
}

fn spec() -> PipelineSpec<Vec<usize>, usize> {
    let c = cfg();
    let p = cfg();
    PipelineSpec::new(collate, move |ctx, batch, _rng| {
        let ids = &batch["ids"];
        let weights = Tensor::ones(ids.shape(), ctx.dtype());
        lm_loss(ctx, &c, ids, &batch["labels"], &weights)
    })
    .with_predict(
        move |session, batch, _rng| {
            let mut ctx = session.ctx();
            let logits = forward(&mut ctx, &p, &batch["ids"])?;
            let logits = ctx.value(&logits)?;
            let (b, t, v) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
            let next: Vec<usize> = (0..b)
                .map(|r| {
                    let row = &logits.data()[(r * t + t - 1) * v..(r * t + t) * v];
                    (0..v).max_by(|&i, &j| row[i].total_cmp(&row[j]).then(j.cmp(&i))).unwrap()
                })
                .collect();
            let mut out = Batch::new();
            out.insert("next".into(), Tensor::from_indices(&[b], &next)?);
            Ok(out)
        },
        |out| Ok(out["next"].to_indices()),
    )
    .with_metric(|examples, preds| {
        let hits = examples.iter().zip(preds).filter(|(e, p)| e[T] == **p).count();
        IndexMap::from([("accuracy".to_string(), hits as f64 / examples.len() as f64)])
    })
}

fn run_config(dtype: DType) -> RunConfig {
    RunConfig {
        n_epochs: 2,
        per_device_batch_size: 4,
        eval_per_device_batch_size: 3,
        learning_rate: 1e-2,
        warmup_rate: 0.25,
        weight_decay: 0.01,
        seed: 7,
        dtype,
        checked: true,
        ..RunConfig::default()
    }
}

fn deployer(devices: usize, mp: usize, workdir: Option<&std::path::Path>) -> Deployer {
    Deployer::setup(MeshConfig::single_host(devices), mp, 7, workdir).unwrap()
}

fn trainer<'a>(d: &'a Deployer, config: RunConfig) -> Trainer<'a, Vec<usize>, usize> {
    let params = cfg().init(3, config.dtype).unwrap();
    Trainer::new(d, spec(), config, &params, &IndexMap::new()).unwrap()
}

fn max_rel(a: &ParamTree, b: &ParamTree) -> f64 {
    a.iter()
        .map(|(n, t)| t.rel_deviation(b.get(n).unwrap()).unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn identical_seeds_give_identical_logs_and_params() {
    let (dir_a, dir_b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let data = dataset(32, 1);
    let eval = dataset(10, 2);
    let mut runs = Vec::new();
    for dir in [&dir_a, &dir_b] {
        let d = deployer(4, 2, Some(dir.path()));
        let mut t = trainer(&d, run_config(DType::F32));
        let summary = t.fit(&data, Some(&eval)).unwrap();
        assert_eq!(summary.total_steps, 8);
        assert_eq!(summary.evals.len(), 2);
        runs.push((t.params().unwrap(), t.log_lines().to_vec()));
    }
    assert!(runs[0].0.bit_eq(&runs[1].0));
    assert_eq!(runs[0].1, runs[1].1);
    let log_a = std::fs::read(dir_a.path().join("run.log")).unwrap();
    assert_eq!(log_a, std::fs::read(dir_b.path().join("run.log")).unwrap());
    let text = String::from_utf8(log_a).unwrap();
    assert!(text.lines().next().unwrap().starts_with("step=1 loss="));
    assert!(text.contains("epoch=1 eval_loss="));
    assert!(text.contains(" accuracy="));
    assert!(dir_a.path().join("metrics.txt").exists());
}

#[test]
fn accumulation_and_data_parallelism_match_the_large_batch() {
    let data = dataset(64, 3);
    let base = RunConfig {
        n_epochs: 1,
        max_steps: Some(20),
        learning_rate: 3e-3,
        ..run_config(DType::F64)
    };
    let run = |devices: usize, per: usize, acc: usize| {
        let d = deployer(devices, 1, None);
        let mut t = trainer(
            &d,
            RunConfig {
                per_device_batch_size: per,
                accumulate_grad_batches: acc,
                n_epochs: 20,
                ..base.clone()
            },
        );
        let s = t.fit(&data, None).unwrap();
        assert_eq!(s.losses.len(), 20);
        (t.params().unwrap(), s.losses)
    };
    let (big, big_losses) = run(1, 4, 1);
    let (accum, acc_losses) = run(1, 2, 2);
    let (dp, dp_losses) = run(2, 2, 1);
    assert!(max_rel(&accum, &big) <= 1e-10, "{}", max_rel(&accum, &big));
    assert!(max_rel(&dp, &big) <= 1e-10, "{}", max_rel(&dp, &big));
    for ((a, b), c) in big_losses.iter().zip(&acc_losses).zip(&dp_losses) {
        assert!((a.1 - b.1).abs() <= 1e-10 * a.1.abs());
        assert!((a.1 - c.1).abs() <= 1e-10 * a.1.abs());
    }
}

#[test]
fn resume_is_bit_exact() {
    let data = dataset(24, 4);
    let eval = dataset(5, 5);
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        n_epochs: 3,
        ..run_config(DType::F64)
    };
    let d = deployer(2, 2, None);
    let mut straight = trainer(&d, config.clone());
    straight.fit(&data, Some(&eval)).unwrap();

    let d_half = deployer(2, 2, Some(dir.path()));
    let mut first = trainer(
        &d_half,
        RunConfig {
            stop_after_steps: Some(4),
            ..config.clone()
        },
    );
    first.fit(&data, Some(&eval)).unwrap();
    assert_eq!(first.state().step, 4);
    let ckpt = load_checkpoint(&dir.path().join("last.swck")).unwrap();
    assert_eq!(ckpt.step, 4);
    let mut second = Trainer::from_checkpoint(&d, spec(), config, ckpt, &IndexMap::new()).unwrap();
    second.fit(&data, Some(&eval)).unwrap();

    assert!(second.params().unwrap().bit_eq(&straight.params().unwrap()));
    assert_eq!(second.state(), straight.state());
    let mut joined = first.log_lines().to_vec();
    joined.extend_from_slice(second.log_lines());
    assert_eq!(joined, straight.log_lines());
}

#[test]
fn checkpoints_reshard_across_mesh_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let d2 = deployer(2, 2, Some(dir.path()));
    let mut t = trainer(
        &d2,
        RunConfig {
            n_epochs: 1,
            ..run_config(DType::F32)
        },
    );
    t.fit(&dataset(8, 6), None).unwrap();
    assert!(t.plan().entries.values().any(|p| *p != Partition::Replicated));
    let ckpt = load_checkpoint(&dir.path().join("last.swck")).unwrap();
    assert!(ckpt.params.bit_eq(&t.params().unwrap()));
    assert!(ckpt.adam_v.bit_eq(&gather_tree(&t.state().adam_v).unwrap()));

    let d4 = deployer(4, 4, None);
    let resumed = Trainer::from_checkpoint(&d4, spec(), run_config(DType::F32), ckpt, &IndexMap::new()).unwrap();
    assert!(resumed.params().unwrap().bit_eq(&t.params().unwrap()));
    assert_eq!(resumed.state().params["block_0/mlp/fc1/kernel"].shards().len(), 4);
}

#[test]
fn predictions_do_not_depend_on_batching() {
    let examples = dataset(13, 8);
    let mut outputs = Vec::new();
    for (devices, per) in [(1, 2), (1, 10), (2, 3), (4, 1)] {
        let d = deployer(devices, 1.max(devices / 2), None);
        let t = trainer(&d, run_config(DType::F32));
        let s = spec();
        let mut rng = RngStreams::new(0);
        let preds = Predictor::new(&d, &s).predict(t.state(), &examples, per, &mut rng).unwrap();
        assert_eq!(preds.len(), examples.len());
        outputs.push(preds);
    }
    for o in &outputs[1..] {
        assert_eq!(o, &outputs[0]);
    }
}

#[test]
fn pred_fn_batch_mismatch_is_reported() {
    let d = deployer(1, 1, None);
    let t = trainer(&d, run_config(DType::F32));
    let s = PipelineSpec::<Vec<usize>, usize>::new(collate, |ctx, batch, _| {
        let x = ctx.input(&batch["ids"].with_dtype(DType::F32)?)?;
        ctx.mean(&x)
    })
    .with_predict(
        |_, _, _| {
            let mut out = Batch::new();
            out.insert("y".into(), Tensor::zeros(&[1], DType::F32));
            Ok(out)
        },
        |out| Ok(vec![0; out["y"].shape()[0]]),
    );
    let err = Predictor::new(&d, &s)
        .predict(t.state(), &dataset(5, 0), 4, &mut RngStreams::new(0))
        .unwrap_err();
    assert!(matches!(err, PipelineError::PredictBatchMismatch { expected: 4, got: 1, .. }), "{err}");
}

#[test]
fn collate_shape_drift_is_an_error() {
    let d = deployer(1, 1, None);
    // Pads to a length that grows after the first call, as a collate that
    // pads to the longest example in each batch would.
    let calls = std::cell::Cell::new(0usize);
    let c = cfg();
    let s = PipelineSpec::<Vec<usize>, usize>::new(
        move |examples: &[Vec<usize>]| {
            calls.set(calls.get() + 1);
            let mut batch = collate(examples)?;
            if calls.get() > 1 {
                let ids = &batch["ids"];
                let pad = Tensor::from_indices(&[ids.shape()[0], 1], &vec![0; ids.shape()[0]])?;
                let longer = Tensor::concat(&[ids, &pad], 1)?;
                batch.insert("ids".into(), longer);
            }
            Ok(batch)
        },
        move |ctx, batch, _| {
            let w = Tensor::ones(batch["labels"].shape(), ctx.dtype());
            lm_loss(ctx, &c, &batch["ids"], &batch["labels"], &w)
        },
    );
    let params = cfg().init(3, DType::F32).unwrap();
    let config = RunConfig {
        n_epochs: 1,
        ..run_config(DType::F32)
    };
    let mut t = Trainer::new(&d, s, config, &params, &IndexMap::new()).unwrap();
    match t.fit(&dataset(8, 9), None) {
        Err(PipelineError::CollateShapeDrift {
            batch_size: 4,
            key,
            expected,
            actual,
        }) => {
            assert_eq!(key, "ids");
            assert_eq!(expected, Some(vec![4, T]));
            assert_eq!(actual, Some(vec![4, T + 1]));
        }
        other => panic!("{:?}", other.map(|s| s.total_steps)),
    }
    assert_eq!(t.state().step, 1);
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let d = deployer(1, 1, None);
    let s = PipelineSpec::<Vec<usize>, usize>::new(collate, |ctx, batch, _| {
        let w = ctx.param("w")?;
        let x = ctx.input(&batch["ids"].with_dtype(DType::F64)?)?;
        let s = ctx.sum(&x)?;
        let l = ctx.mul(&s, &w)?;
        let l = ctx.sum(&l)?;
        ctx.scale(&l, f64::INFINITY)
    });
    let mut params = ParamTree::new();
    params.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
    let config = RunConfig {
        checked: false,
        dtype: DType::F64,
        ..run_config(DType::F64)
    };
    let mut t = Trainer::new(&d, s, config, &params, &IndexMap::new()).unwrap();
    match t.fit(&dataset(8, 0), None) {
        Err(PipelineError::NonFiniteLoss { step: 0, .. }) => {}
        other => panic!("{:?}", other.map(|s| s.total_steps)),
    }
}
