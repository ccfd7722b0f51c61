//! CIDEr-D: TF-IDF n-gram similarity with clipping and a length penalty.

use super::ngram::{CorpusStats, NgramCounts, MAX_N};
use std::collections::HashMap;
use std::hash::Hash;

const SIGMA: f64 = 6.0;

/// Sum in ascending order, so the result does not depend on hash-map
/// iteration order.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

struct TfIdf<T> {
    vec: Vec<HashMap<Vec<T>, f64>>,
    norm: [f64; MAX_N],
    /// Counted from bigrams, as in the reference scorer.
    length: f64,
}

/// Scorer with document frequencies fixed from a training corpus.
#[derive(Debug, Clone)]
pub struct CiderD<T: Hash + Eq> {
    stats: CorpusStats<T>,
    log_docs: f64,
}

impl<T: Hash + Eq + Clone> CiderD<T> {
    pub fn new(stats: CorpusStats<T>) -> Self {
        let log_docs = (stats.documents.max(1) as f64).ln();
        Self { stats, log_docs }
    }

    pub fn stats(&self) -> &CorpusStats<T> {
        &self.stats
    }

    fn tfidf(&self, tokens: &[T]) -> TfIdf<T> {
        let counts = NgramCounts::new(tokens);
        let mut vec = Vec::with_capacity(MAX_N);
        let mut norm = [0.0; MAX_N];
        let mut length = 0.0;
        for (n, order) in counts.by_order.into_iter().enumerate() {
            let mut v = HashMap::with_capacity(order.len());
            let mut squares = Vec::with_capacity(order.len());
            for (gram, tf) in order {
                let df = f64::from(self.stats.df(&gram)).max(1.0).ln();
                let w = f64::from(tf) * (self.log_docs - df);
                squares.push(w * w);
                if n == 1 {
                    length += f64::from(tf);
                }
                v.insert(gram, w);
            }
            norm[n] = ordered_sum(squares);
            vec.push(v);
        }
        for x in &mut norm {
            *x = x.sqrt();
        }
        TfIdf { vec, norm, length }
    }

    fn sim(hyp: &TfIdf<T>, reference: &TfIdf<T>) -> [f64; MAX_N] {
        let delta = hyp.length - reference.length;
        let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        let mut val = [0.0; MAX_N];
        for (n, v) in val.iter_mut().enumerate() {
            *v = ordered_sum(
                hyp.vec[n]
                    .iter()
                    .filter_map(|(gram, &h)| reference.vec[n].get(gram).map(|&r| h.min(r) * r))
                    .collect(),
            );
            if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
                *v /= hyp.norm[n] * reference.norm[n];
            }
            *v *= penalty;
        }
        val
    }

    /// Score of one candidate against its references. Empty candidates and
    /// empty reference lists score 0.
    pub fn score(&self, candidate: &[T], references: &[&[T]]) -> f64 {
        if candidate.is_empty() || references.is_empty() {
            return 0.0;
        }
        let hyp = self.tfidf(candidate);
        let mut total = [0.0; MAX_N];
        for r in references {
            let s = Self::sim(&hyp, &self.tfidf(r));
            for n in 0..MAX_N {
                total[n] += s[n];
            }
        }
        let mean = total.iter().sum::<f64>() / MAX_N as f64;
        mean / references.len() as f64 * 10.0
    }
}
