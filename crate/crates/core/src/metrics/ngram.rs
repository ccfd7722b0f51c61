//! N-gram counting shared by the CIDEr-D and BLEU scorers.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

pub const MAX_N: usize = 4;

/// Per-order n-gram counts of one document; index `n−1` holds the n-grams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramCounts<T: Hash + Eq> {
    pub by_order: Vec<HashMap<Vec<T>, u32>>,
}

impl<T: Hash + Eq + Clone> NgramCounts<T> {
    pub fn new(tokens: &[T]) -> Self {
        let by_order = (1..=MAX_N)
            .map(|n| {
                let mut m = HashMap::new();
                for w in tokens.windows(n) {
                    *m.entry(w.to_vec()).or_insert(0) += 1;
                }
                m
            })
            .collect();
        Self { by_order }
    }

    pub fn order(&self, n: usize) -> &HashMap<Vec<T>, u32> {
        &self.by_order[n - 1]
    }
}

/// Document frequencies over a reference corpus. A document is one image,
/// i.e. the union of its reference n-grams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats<T: Hash + Eq> {
    pub df: HashMap<Vec<T>, u32>,
    pub documents: usize,
}

impl<T: Hash + Eq + Clone> CorpusStats<T> {
    pub fn from_references<'a, I, R>(images: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = &'a [T]>,
        T: 'a,
    {
        let mut df: HashMap<Vec<T>, u32> = HashMap::new();
        let mut documents = 0;
        for refs in images {
            documents += 1;
            let mut seen: HashSet<Vec<T>> = HashSet::new();
            for r in refs {
                for order in NgramCounts::new(r).by_order {
                    seen.extend(order.into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Self { df, documents }
    }

    pub fn df(&self, gram: &[T]) -> u32 {
        self.df.get(gram).copied().unwrap_or(0)
    }
}
