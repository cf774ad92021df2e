//! Character-level language model on a small built-in corpus.
//!
//! Inputs are windows of `SEQ + 1` characters. The loss is next-character
//! cross entropy; prediction greedily continues the first `SEQ` characters
//! for `GEN` steps, sliding the context window.

use anyhow::{bail, Context as _};
use indexmap::IndexMap;
use shardwise::model::{forward, lm_loss, TransformerConfig};
use shardwise::pipeline::{Batch, PipelineSpec, RunConfig};
use shardwise::{DType, ParamTree, Tensor};

use super::{argmax_at, index_rows, Example};

pub const SEQ: usize = 16;
pub const GEN: usize = 8;

const CORPUS: &str = "the cat sat on the mat. the dog sat on the log. \
a bird sang in the tree. the sun rose over the hill. \
the cat saw the bird and the dog saw the cat. \
we sat in the sun on the hill by the tree. ";

const REPEATS: usize = 6;

pub struct CharLm {
    vocab: Vec<char>,
}

impl Default for CharLm {
    fn default() -> Self {
        Self::new()
    }
}

impl CharLm {
    pub fn new() -> Self {
        let mut vocab: Vec<char> = CORPUS.chars().collect();
        vocab.sort_unstable();
        vocab.dedup();
        Self { vocab }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn model(&self) -> TransformerConfig {
        TransformerConfig {
            vocab_size: self.vocab.len(),
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: SEQ,
            tie_embeddings: true,
        }
    }

    pub fn encode(&self, text: &str) -> anyhow::Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.vocab
                    .binary_search(&c)
                    .map_err(|_| anyhow::anyhow!("character {c:?} is not in the vocabulary"))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab[i]).collect()
    }
}

fn collate(examples: &[Vec<usize>]) -> shardwise::pipeline::Result<Batch> {
    let b = examples.len();
    let ids: Vec<usize> = examples.iter().flat_map(|e| e[..SEQ].iter().copied()).collect();
    let labels: Vec<usize> = examples.iter().flat_map(|e| e[1..].iter().copied()).collect();
    Ok(Batch::from([
        ("ids".to_string(), Tensor::from_indices(&[b, SEQ], &ids)?),
        ("labels".to_string(), Tensor::from_indices(&[b, SEQ], &labels)?),
    ]))
}

impl Example for CharLm {
    type Input = Vec<usize>;
    type Output = Vec<usize>;

    fn name(&self) -> &'static str {
        "char-lm"
    }

    fn defaults(&self) -> RunConfig {
        RunConfig {
            n_epochs: 1000,
            max_steps: Some(300),
            per_device_batch_size: 16,
            eval_per_device_batch_size: 16,
            learning_rate: 1e-2,
            warmup_rate: 0.1,
            weight_decay: 0.0,
            dtype: DType::F32,
            ..RunConfig::default()
        }
    }

    fn init_params(&self, seed: u64, dtype: DType) -> anyhow::Result<ParamTree> {
        Ok(self.model().init(seed, dtype)?)
    }

    fn datasets(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let text = CORPUS.repeat(REPEATS);
        let ids = self.encode(&text).expect("corpus characters are the vocabulary");
        let windows: Vec<Vec<usize>> = ids.windows(SEQ + 1).map(<[usize]>::to_vec).collect();
        let n_eval = 32;
        let (train, eval) = windows.split_at(windows.len() - n_eval);
        (train.to_vec(), eval.to_vec())
    }

    fn spec(&self) -> PipelineSpec<Vec<usize>, Vec<usize>> {
        let model = self.model();
        PipelineSpec::new(collate, move |ctx, batch, _rng| {
            let ids = &batch["ids"];
            let weights = Tensor::ones(ids.shape(), ctx.dtype());
            lm_loss(ctx, &model, ids, &batch["labels"], &weights)
        })
        .with_predict(
            move |session, batch, _rng| {
                let mut window = index_rows(&batch["ids"]);
                let b = window.len();
                let mut generated = vec![Vec::with_capacity(GEN); b];
                for _ in 0..GEN {
                    let flat: Vec<usize> = window.iter().flatten().copied().collect();
                    let mut ctx = session.ctx();
                    let logits = forward(&mut ctx, &model, &Tensor::from_indices(&[b, SEQ], &flat)?)?;
                    let logits = ctx.value(&logits)?;
                    for (r, row) in window.iter_mut().enumerate() {
                        let next = argmax_at(&logits, r, SEQ - 1);
                        generated[r].push(next);
                        row.remove(0);
                        row.push(next);
                    }
                }
                let flat: Vec<usize> = generated.into_iter().flatten().collect();
                Ok(Batch::from([("generated".to_string(), Tensor::from_indices(&[b, GEN], &flat)?)]))
            },
            |out| Ok(index_rows(&out["generated"])),
        )
        .with_metric(|examples, preds| {
            let hits = examples.iter().zip(preds).filter(|(e, p)| p[0] == e[SEQ]).count();
            IndexMap::from([("accuracy".to_string(), hits as f64 / examples.len().max(1) as f64)])
        })
    }

    /// The last `SEQ` characters of the line, left-padded with spaces.
    fn parse_input(&self, line: &str) -> anyhow::Result<Vec<usize>> {
        let chars: Vec<char> = line.chars().collect();
        if chars.is_empty() {
            bail!("empty prompt");
        }
        let tail: String = chars[chars.len().saturating_sub(SEQ)..].iter().collect();
        let mut ids = self.encode(&format!("{tail:>SEQ$}")).context("prompt")?;
        ids.push(ids[SEQ - 1]);
        Ok(ids)
    }

    fn render(&self, input: &Vec<usize>, output: &Vec<usize>) -> String {
        format!("{}|{}", self.decode(&input[..SEQ]), self.decode(output))
    }
}
