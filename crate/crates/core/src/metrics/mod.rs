//! Caption metrics (CIDEr-D, BLEU-4), the coverage reward and evaluation reports.

pub mod bleu;
pub mod cider;
pub mod coverage;
pub mod ngram;
pub mod reward;

pub use bleu::{bleu4, bleu_stats, corpus_bleu4, BleuStats};
pub use cider::CiderD;
pub use coverage::{coverage_reward, LexiconEntry, ObjectLexicon, LEXICON_SIZE};
pub use ngram::{CorpusStats, NgramCounts};
pub use reward::{combined_reward, scst_loss, RewardBundle, RewardModel, Score};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

/// Per-image scores written with `--dump`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub text: String,
    pub cider: f64,
    pub bleu4: f64,
    pub coverage: f64,
    pub sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "CIDEr")]
    pub cider: f64,
    #[serde(rename = "BLEU4")]
    pub bleu4: f64,
    pub coverage_mean: f64,
    /// Number of paragraphs with each sentence count.
    pub sentence_histogram: BTreeMap<usize, usize>,
    pub images: usize,
}

/// One scored image: tokens of the candidate and gold paragraphs.
pub struct EvalItem<T> {
    pub image_id: String,
    pub text: String,
    pub candidate: Vec<T>,
    pub gold: Vec<T>,
    pub sentences: usize,
}

/// Mean CIDEr-D, corpus BLEU-4 and mean coverage over `items`.
pub fn report<T: Hash + Eq + Clone>(
    items: &[EvalItem<T>],
    cider: &CiderD<T>,
    objects: &HashSet<T>,
) -> (MetricReport, Vec<ImageScore>) {
    let mut per_image = Vec::with_capacity(items.len());
    let mut pooled = BleuStats::default();
    let mut histogram = BTreeMap::new();
    for it in items {
        let refs = [&it.gold[..]];
        let stats = bleu_stats(&it.candidate, &refs);
        pooled.add(&stats);
        *histogram.entry(it.sentences).or_insert(0) += 1;
        per_image.push(ImageScore {
            image_id: it.image_id.clone(),
            text: it.text.clone(),
            cider: cider.score(&it.candidate, &refs),
            bleu4: stats.score(),
            coverage: coverage_reward(&it.candidate, &it.gold, objects),
            sentences: it.sentences,
        });
    }
    let n = items.len().max(1) as f64;
    let report = MetricReport {
        cider: per_image.iter().map(|s| s.cider).sum::<f64>() / n,
        bleu4: pooled.score(),
        coverage_mean: per_image.iter().map(|s| s.coverage).sum::<f64>() / n,
        sentence_histogram: histogram,
        images: items.len(),
    };
    (report, per_image)
}
