//! Sequence-to-sequence copy task on a decoder-only transformer.
//!
//! A source of `LEN` digits is followed by a separator and its copy. The loss
//! covers only the copy; prediction decodes it greedily after the separator.

use anyhow::bail;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shardwise::model::{forward, lm_loss, TransformerConfig};
use shardwise::pipeline::{Batch, PipelineSpec, RunConfig};
use shardwise::{DType, ParamTree, Tensor};

use super::{argmax_at, index_rows, Example};

pub const LEN: usize = 6;
const SEP: usize = 10;
const PAD: usize = 11;
const VOCAB: usize = 12;
/// Input positions: source, separator, all but the last copied digit.
const T: usize = 2 * LEN;

const DATA_SEED: u64 = 0x05e9_25e9;

#[derive(Default)]
pub struct Seq2SeqCopy;

impl Seq2SeqCopy {
    pub fn model(&self) -> TransformerConfig {
        TransformerConfig {
            vocab_size: VOCAB,
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: T,
            tie_embeddings: true,
        }
    }
}

fn collate(examples: &[Vec<usize>]) -> shardwise::pipeline::Result<Batch> {
    let b = examples.len();
    let (mut ids, mut labels, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for src in examples {
        let mut full = src.clone();
        full.push(SEP);
        full.extend_from_slice(src);
        ids.extend_from_slice(&full[..T]);
        labels.extend_from_slice(&full[1..]);
        weights.extend((0..T).map(|p| if p >= LEN { 1.0 } else { 0.0 }));
    }
    Ok(Batch::from([
        ("ids".to_string(), Tensor::from_indices(&[b, T], &ids)?),
        ("labels".to_string(), Tensor::from_indices(&[b, T], &labels)?),
        ("weights".to_string(), Tensor::from_vec(&[b, T], weights)?),
    ]))
}

impl Example for Seq2SeqCopy {
    type Input = Vec<usize>;
    type Output = Vec<usize>;

    fn name(&self) -> &'static str {
        "seq2seq-copy"
    }

    fn defaults(&self) -> RunConfig {
        RunConfig {
            n_epochs: 1000,
            max_steps: Some(400),
            per_device_batch_size: 16,
            eval_per_device_batch_size: 16,
            learning_rate: 3e-3,
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
        let mut rng = ChaCha8Rng::seed_from_u64(DATA_SEED);
        let mut draw = |n: usize| -> Vec<Vec<usize>> {
            (0..n)
                .map(|_| (0..LEN).map(|_| rng.random_range(0..10)).collect())
                .collect()
        };
        let train = draw(2048);
        let eval = draw(64);
        (train, eval)
    }

    fn spec(&self) -> PipelineSpec<Vec<usize>, Vec<usize>> {
        let model = self.model();
        PipelineSpec::new(collate, move |ctx, batch, _rng| {
            let weights = batch["weights"].with_dtype(ctx.dtype())?;
            lm_loss(ctx, &model, &batch["ids"], &batch["labels"], &weights)
        })
        .with_predict(
            move |session, batch, _rng| {
                let rows = index_rows(&batch["ids"]);
                let b = rows.len();
                let mut window: Vec<Vec<usize>> = rows
                    .iter()
                    .map(|r| {
                        let mut w = r[..=LEN].to_vec();
                        w.resize(T, PAD);
                        w
                    })
                    .collect();
                let mut copies = vec![Vec::with_capacity(LEN); b];
                for k in 0..LEN {
                    let flat: Vec<usize> = window.iter().flatten().copied().collect();
                    let mut ctx = session.ctx();
                    let logits = forward(&mut ctx, &model, &Tensor::from_indices(&[b, T], &flat)?)?;
                    let logits = ctx.value(&logits)?;
                    for (r, w) in window.iter_mut().enumerate() {
                        let next = argmax_at(&logits, r, LEN + k);
                        copies[r].push(next);
                        if LEN + k + 1 < T {
                            w[LEN + k + 1] = next;
                        }
                    }
                }
                let flat: Vec<usize> = copies.into_iter().flatten().collect();
                Ok(Batch::from([("copy".to_string(), Tensor::from_indices(&[b, LEN], &flat)?)]))
            },
            |out| Ok(index_rows(&out["copy"])),
        )
        .with_metric(|examples, preds| {
            let n = examples.len().max(1) as f64;
            let exact = examples.iter().zip(preds).filter(|(e, p)| e == p).count();
            let tokens: usize = examples
                .iter()
                .zip(preds)
                .map(|(e, p)| e.iter().zip(p).filter(|(a, b)| a == b).count())
                .sum();
            IndexMap::from([
                ("exact_match".to_string(), exact as f64 / n),
                ("token_accuracy".to_string(), tokens as f64 / (n * LEN as f64)),
            ])
        })
    }

    fn parse_input(&self, line: &str) -> anyhow::Result<Vec<usize>> {
        let digits: Vec<usize> = line
            .trim()
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| anyhow::anyhow!("input must be digits only, got {line:?}"))?;
        if digits.len() != LEN {
            bail!("input must have exactly {LEN} digits, got {}", digits.len());
        }
        Ok(digits)
    }

    fn render(&self, input: &Vec<usize>, output: &Vec<usize>) -> String {
        let s = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<String>();
        format!("{}|{}", s(input), s(output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_covers_only_the_copy() {
        let b = collate(&[vec![1, 2, 3, 4, 5, 6]]).unwrap();
        assert_eq!(b["ids"].to_indices(), vec![1, 2, 3, 4, 5, 6, SEP, 1, 2, 3, 4, 5]);
        assert_eq!(b["labels"].to_indices(), vec![2, 3, 4, 5, 6, SEP, 1, 2, 3, 4, 5, 6]);
        let w = b["weights"].data();
        assert_eq!(w.iter().sum::<f64>(), LEN as f64);
        assert_eq!(w[LEN - 1], 0.0);
        assert_eq!(w[LEN], 1.0);
        assert!(Seq2SeqCopy.parse_input("12345").is_err());
        assert_eq!(Seq2SeqCopy.parse_input("012345").unwrap(), vec![0, 1, 2, 3, 4, 5]);
    }
}
