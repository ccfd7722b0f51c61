//! Tokenization and vocabulary construction.

use crate::error::{Error, Result};
use crate::generator::Vocabulary;
use std::collections::HashMap;

/// Lowercases, splits sentences on `.`, `!` and `?`, keeps only
/// alphanumeric characters inside tokens, and truncates to `max_sentences`
/// sentences of at most `max_words` tokens. Empty sentences are dropped.
pub fn tokenize(text: &str, max_sentences: usize, max_words: usize) -> Result<Vec<Vec<String>>> {
    let lower = text.to_lowercase();
    let sentences: Vec<Vec<String>> = lower
        .split(['.', '!', '?'])
        .map(|s| {
            s.split_whitespace()
                .map(|t| t.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
                .filter(|t| !t.is_empty())
                .take(max_words)
                .collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .take(max_sentences)
        .collect();
    if sentences.is_empty() {
        return Err(Error::Data(format!("no tokens in paragraph {text:?}")));
    }
    Ok(sentences)
}

/// Renders token sentences as `"w w. w w."`; `tokenize` inverts it.
pub fn render(sentences: &[Vec<String>]) -> String {
    sentences
        .iter()
        .map(|s| format!("{}.", s.join(" ")))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn token_counts<'a>(paragraphs: impl IntoIterator<Item = &'a Vec<Vec<String>>>) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for p in paragraphs {
        for t in p.iter().flatten() {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Keeps tokens seen at least `min_count` times, ordered by frequency
/// (descending) then lexicographically.
pub fn build_vocab<'a>(
    paragraphs: impl IntoIterator<Item = &'a Vec<Vec<String>>>,
    min_count: u64,
) -> Result<Vocabulary> {
    let mut n = 0;
    let counts = token_counts(paragraphs.into_iter().inspect(|_| n += 1));
    if n == 0 {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty training set".into(),
        ));
    }
    vocab_from_counts(&counts, min_count)
}

pub fn vocab_from_counts(counts: &HashMap<String, u64>, min_count: u64) -> Result<Vocabulary> {
    let mut kept: Vec<(&String, u64)> = counts
        .iter()
        .filter(|(t, &c)| c >= min_count && !crate::generator::vocab::SPECIALS.contains(&t.as_str()))
        .map(|(t, &c)| (t, c))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_words(kept.into_iter().map(|(t, _)| t.clone()))
}
