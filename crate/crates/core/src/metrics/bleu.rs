//! Corpus-level BLEU-4 with clipped precision and a brevity penalty.

use super::ngram::{NgramCounts, MAX_N};
use std::collections::HashMap;
use std::hash::Hash;

/// Matched and total n-gram counts plus the lengths used for brevity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matched: [u64; MAX_N],
    pub total: [u64; MAX_N],
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_N {
            self.matched[n] += other.matched[n];
            self.total[n] += other.total[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 || self.matched.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_N)
            .map(|n| (self.matched[n] as f64 / self.total[n] as f64).ln())
            .sum::<f64>()
            / MAX_N as f64;
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * log_p.exp()
    }
}

/// Sufficient statistics of one candidate. The reference length is the
/// one closest to the candidate's, preferring the shorter on ties.
pub fn bleu_stats<T: Hash + Eq + Clone>(candidate: &[T], references: &[&[T]]) -> BleuStats {
    let cand = NgramCounts::new(candidate);
    let refs: Vec<NgramCounts<T>> = references.iter().map(|r| NgramCounts::new(r)).collect();
    let mut stats = BleuStats {
        candidate_len: candidate.len() as u64,
        reference_len: references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
            .unwrap_or(0) as u64,
        ..BleuStats::default()
    };
    for n in 1..=MAX_N {
        let mut max_ref: HashMap<&Vec<T>, u32> = HashMap::new();
        for r in &refs {
            for (g, &c) in r.order(n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, &c) in cand.order(n) {
            stats.matched[n - 1] += u64::from(c.min(max_ref.get(g).copied().unwrap_or(0)));
        }
        stats.total[n - 1] = (candidate.len() + 1).saturating_sub(n) as u64;
    }
    stats
}

pub fn bleu4<T: Hash + Eq + Clone>(candidate: &[T], references: &[&[T]]) -> f64 {
    bleu_stats(candidate, references).score()
}

/// Pools statistics over every (candidate, references) pair before scoring.
pub fn corpus_bleu4<T: Hash + Eq + Clone>(pairs: &[(&[T], Vec<&[T]>)]) -> f64 {
    let mut total = BleuStats::default();
    for (c, refs) in pairs {
        total.add(&bleu_stats(c, refs));
    }
    total.score()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_one() {
        let s = ["the", "cat", "is", "on", "the", "mat"];
        assert_eq!(bleu4(&s, &[&s]), 1.0);
    }

    #[test]
    fn no_unigram_overlap_is_zero() {
        assert_eq!(bleu4(&["a", "b", "c", "d"], &[&["w", "x", "y", "z"]]), 0.0);
    }

    #[test]
    fn hand_counted_precisions() {
        // cand: a b c d e ; ref: a b c d f g
        // p1 = 4/5, p2 = 3/4, p3 = 2/3, p4 = 1/2, c=5 < r=6
        let st = bleu_stats(&["a", "b", "c", "d", "e"], &[&["a", "b", "c", "d", "f", "g"]]);
        assert_eq!(st.matched, [4, 3, 2, 1]);
        assert_eq!(st.total, [5, 4, 3, 2]);
        let want = (1.0f64 - 6.0 / 5.0).exp() * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((st.score() - want).abs() < 1e-15);
    }

    #[test]
    fn closest_reference_prefers_shorter() {
        let st = bleu_stats(&["a", "b", "c"], &[&["a", "b"], &["a", "b", "c", "d"]]);
        assert_eq!(st.reference_len, 2);
    }
}
