//! Joining dataset records, features and splits into training examples.

use crate::cae::RawRegionSet;
use crate::config::TrainConfig;
use crate::corpus::{token_counts, tokenize, vocab_from_counts, DatasetRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::generator::{Paragraph, Vocabulary};
use crate::metrics::ObjectLexicon;
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image_id: String,
    /// Canonical regions: sorted by objectness, exactly `M` rows.
    pub regions: RawRegionSet,
    /// Tokenized gold paragraph, words as written.
    pub tokens: Vec<Vec<String>>,
    /// The same paragraph as vocabulary ids.
    pub gold: Paragraph,
}

impl Example {
    pub fn words(&self) -> Vec<String> {
        self.tokens.concat()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl TrainingData {
    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Tokenized paragraphs keyed by image id.
pub fn tokenize_records(records: &[DatasetRecord], cfg: &TrainConfig) -> Result<BTreeMap<String, Vec<Vec<String>>>> {
    records
        .iter()
        .map(|r| {
            let t = tokenize(&r.paragraph, cfg.max_sentences, cfg.max_words)
                .map_err(|e| Error::Data(format!("image {}: {e}", r.image_id)))?;
            Ok((r.image_id.clone(), t))
        })
        .collect()
}

/// Word counts over the training split.
pub fn train_counts(tokens: &BTreeMap<String, Vec<Vec<String>>>, split: &SplitSpec) -> Result<HashMap<String, u64>> {
    let paragraphs = split
        .train
        .iter()
        .map(|id| {
            tokens
                .get(id)
                .ok_or_else(|| Error::Data(format!("no paragraph for image {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if paragraphs.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    Ok(token_counts(paragraphs))
}

pub fn build_train_vocab(
    tokens: &BTreeMap<String, Vec<Vec<String>>>,
    split: &SplitSpec,
    min_count: u64,
) -> Result<Vocabulary> {
    vocab_from_counts(&train_counts(tokens, split)?, min_count)
}

/// The lexicon from a candidate list when given, else from the vocabulary.
pub fn build_lexicon(
    counts: &HashMap<String, u64>,
    vocab: &Vocabulary,
    candidates: Option<&[String]>,
    size: usize,
) -> ObjectLexicon {
    match candidates {
        Some(c) => ObjectLexicon::from_candidates(c, counts, size),
        None => ObjectLexicon::from_vocabulary(vocab, counts, size),
    }
}

pub fn prepare_examples(
    ids: &[String],
    tokens: &BTreeMap<String, Vec<Vec<String>>>,
    features: &BTreeMap<String, RawRegionSet>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<Example>> {
    ids.iter()
        .map(|id| {
            let t = tokens
                .get(id)
                .ok_or_else(|| Error::Data(format!("no paragraph for image {id}")))?;
            let raw = features
                .get(id)
                .ok_or_else(|| Error::Data(format!("missing features for image {id}")))?;
            let regions = if raw.regions() == cfg.regions && raw.is_sorted() {
                raw.clone()
            } else {
                raw.canonicalize(cfg.regions)?
            };
            Ok(Example {
                image_id: id.clone(),
                regions,
                tokens: t.clone(),
                gold: Paragraph::from_tokens(vocab, t),
            })
        })
        .collect()
}

pub fn prepare_data(
    records: &[DatasetRecord],
    features: &BTreeMap<String, RawRegionSet>,
    split: &SplitSpec,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainingData> {
    split.validate(records.iter().map(|r| r.image_id.as_str()))?;
    let tokens = tokenize_records(records, cfg)?;
    Ok(TrainingData {
        train: prepare_examples(&split.train, &tokens, features, vocab, cfg)?,
        val: prepare_examples(&split.val, &tokens, features, vocab, cfg)?,
        test: prepare_examples(&split.test, &tokens, features, vocab, cfg)?,
    })
}
