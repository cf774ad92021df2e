//! The shipped example pipelines. Each one supplies only data, a model
//! initialization, run-config defaults and the collate/loss/predict
//! functions; training, prediction, sharding and checkpoints come from the
//! pipeline module.

pub mod char_lm;
pub mod maml_sinusoid;
pub mod seq2seq_copy;

use clap::ValueEnum;
use shardwise::pipeline::{PipelineSpec, RunConfig};
use shardwise::{DType, ParamTree, Tensor};

pub use char_lm::CharLm;
pub use maml_sinusoid::MamlSinusoid;
pub use seq2seq_copy::Seq2SeqCopy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExampleName {
    CharLm,
    Seq2seqCopy,
    MamlSinusoid,
}

pub trait Example {
    type Input: Clone + 'static;
    type Output: 'static;

    fn name(&self) -> &'static str;

    /// Run-config defaults; command-line flags override them.
    fn defaults(&self) -> RunConfig;

    fn init_params(&self, seed: u64, dtype: DType) -> anyhow::Result<ParamTree>;

    /// Fixed (train, eval) splits.
    fn datasets(&self) -> (Vec<Self::Input>, Vec<Self::Input>);

    fn spec(&self) -> PipelineSpec<Self::Input, Self::Output>;

    /// One input from a line of a `--input` file.
    fn parse_input(&self, line: &str) -> anyhow::Result<Self::Input>;

    fn render(&self, input: &Self::Input, output: &Self::Output) -> String;

    /// Extra lines written to `debug_trace.txt` before training.
    fn debug_trace(&self) -> anyhow::Result<Vec<String>> {
        Ok(Vec::new())
    }
}

/// Index of the largest logit at `[row, pos, :]` of a `[B, T, V]` tensor.
/// Ties go to the lowest index.
pub(crate) fn argmax_at(logits: &Tensor, row: usize, pos: usize) -> usize {
    let (t, v) = (logits.shape()[1], logits.shape()[2]);
    let start = (row * t + pos) * v;
    let slice = &logits.data()[start..start + v];
    let mut best = 0;
    for (i, x) in slice.iter().enumerate() {
        if *x > slice[best] {
            best = i;
        }
    }
    best
}

/// Splits an `[n, k]` index tensor into rows.
pub(crate) fn index_rows(t: &Tensor) -> Vec<Vec<usize>> {
    let ids = t.to_indices();
    let k = t.shape().get(1).copied().unwrap_or(1).max(1);
    ids.chunks(k).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_maximum() {
        let t = Tensor::from_vec(&[1, 2, 3], vec![0.0, 2.0, 2.0, 5.0, -1.0, 0.0]).unwrap();
        assert_eq!(argmax_at(&t, 0, 0), 1);
        assert_eq!(argmax_at(&t, 0, 1), 0);
        let ids = Tensor::from_indices(&[2, 2], &[1, 2, 3, 4]).unwrap();
        assert_eq!(index_rows(&ids), vec![vec![1, 2], vec![3, 4]]);
    }
}
