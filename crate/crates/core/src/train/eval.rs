//! Greedy evaluation over a split.

use super::data::Example;
use crate::error::Result;
use crate::generator::{decode_paragraph, DecodeOptions, Decoded, TokenId, Vocabulary};
use crate::metrics::{report, CiderD, CorpusStats, EvalItem, ImageScore, MetricReport, ObjectLexicon, RewardModel};
use crate::model::CaeLstm;
use crate::parallel::{map_slice, Execution};
use crate::tensor::ParamStore;
use std::collections::HashSet;

/// Scorers fixed by the training split.
#[derive(Debug, Clone)]
pub struct EvalContext {
    /// CIDEr-D over the written words.
    pub cider: CiderD<String>,
    pub objects: HashSet<String>,
    /// Reward over vocabulary ids, used for self-critical training.
    pub reward: RewardModel,
}

impl EvalContext {
    pub fn new(train: &[Example], vocab: &Vocabulary, lexicon: &ObjectLexicon, beta: f64) -> Result<Self> {
        let words: Vec<Vec<String>> = train.iter().map(Example::words).collect();
        let ids: Vec<Vec<TokenId>> = train.iter().map(|e| e.gold.flatten()).collect();
        let cider = CiderD::new(CorpusStats::from_references(words.iter().map(|w| [&w[..]])));
        let cider_ids = CiderD::new(CorpusStats::from_references(ids.iter().map(|w| [&w[..]])));
        Ok(Self {
            cider,
            objects: lexicon.entries().iter().map(|e| e.token.clone()).collect(),
            reward: RewardModel::new(cider_ids, lexicon.token_ids(vocab), beta)?,
        })
    }
}

pub struct Evaluation {
    pub report: MetricReport,
    pub per_image: Vec<ImageScore>,
    pub decoded: Vec<Decoded>,
}

pub fn decode_all(
    model: &CaeLstm,
    store: &ParamStore,
    examples: &[Example],
    opts: &DecodeOptions,
    exec: Execution,
) -> Result<Vec<Decoded>> {
    map_slice(exec, examples, |ex| {
        decode_paragraph(model, store, &ex.regions, opts, None)
    })
    .into_iter()
    .collect()
}

/// Greedy decode with the configured trigram rule, scored against the
/// written gold words.
pub fn evaluate(
    model: &CaeLstm,
    store: &ParamStore,
    examples: &[Example],
    vocab: &Vocabulary,
    ctx: &EvalContext,
    exec: Execution,
) -> Result<Evaluation> {
    let decoded = decode_all(model, store, examples, &DecodeOptions::greedy(&model.config), exec)?;
    let items: Vec<EvalItem<String>> = examples
        .iter()
        .zip(&decoded)
        .map(|(ex, d)| EvalItem {
            image_id: ex.image_id.clone(),
            text: d.paragraph.render(vocab),
            candidate: vocab
                .decode(&d.paragraph.flatten())
                .into_iter()
                .map(String::from)
                .collect(),
            gold: ex.words(),
            sentences: d.paragraph.len(),
        })
        .collect();
    let (report, per_image) = report(&items, &ctx.cider, &ctx.objects);
    Ok(Evaluation {
        report,
        per_image,
        decoded,
    })
}

/// Mean combined reward of greedy decodes.
pub fn mean_reward(
    model: &CaeLstm,
    store: &ParamStore,
    examples: &[Example],
    reward: &RewardModel,
    exec: Execution,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let decoded = decode_all(model, store, examples, &DecodeOptions::greedy(&model.config), exec)?;
    let total: f64 = examples
        .iter()
        .zip(&decoded)
        .map(|(ex, d)| reward.score(&d.paragraph, &ex.gold).combined)
        .sum();
    Ok(total / examples.len() as f64)
}
