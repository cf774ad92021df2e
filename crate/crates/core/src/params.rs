//! Ordered parameter trees keyed by hierarchical `/`-separated paths.

use indexmap::IndexMap;

use crate::tensor::Tensor;

/// Parameters in insertion order. Names are paths such as
/// `block_0/attn/q/kernel`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    entries: IndexMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter, keeping the original position on
    /// replacement.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn shapes(&self) -> IndexMap<String, Vec<usize>> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Applies `f` to every tensor, keeping names and order.
    pub fn map<E>(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor, E>) -> Result<ParamTree, E> {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| Ok((k.clone(), f(k, v)?)))
            .collect::<Result<_, E>>()?;
        Ok(ParamTree { entries })
    }

    /// True when both trees have the same names in the same order and every
    /// tensor is bit-identical.
    pub fn bit_eq(&self, other: &ParamTree) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}

impl FromIterator<(String, Tensor)> for ParamTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamTree {
            entries: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for ParamTree {
    type Item = (String, Tensor);
    type IntoIter = indexmap::map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.into_iter()
    }
}
