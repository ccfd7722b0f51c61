//! Object lexicon and the coverage reward.

use crate::error::{Error, Result};
use crate::generator::{TokenId, Vocabulary};
use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::path::Path;

pub const LEXICON_SIZE: usize = 1000;

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any", "are", "around", "as",
    "at", "be", "because", "been", "before", "behind", "being", "below", "beside", "between", "both", "but", "by",
    "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from", "front", "further",
    "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how", "i", "if", "in", "into", "is",
    "it", "its", "itself", "just", "left", "more", "most", "near", "next", "no", "nor", "not", "of", "off", "on",
    "once", "one", "only", "or", "other", "our", "out", "over", "own", "right", "same", "she", "side", "so", "some",
    "such", "than", "that", "the", "their", "them", "then", "there", "these", "they", "this", "those", "through", "to",
    "too", "top", "two", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub token: String,
    pub freq: u64,
}

/// The most frequent object tokens, ranked by training frequency
/// (descending, ties lexicographic).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObjectLexicon {
    entries: Vec<LexiconEntry>,
}

impl ObjectLexicon {
    /// Ranks `candidates` by `counts` and keeps the top `size`. Candidates
    /// that never occur in training are dropped.
    pub fn from_candidates<S: AsRef<str>>(
        candidates: impl IntoIterator<Item = S>,
        counts: &HashMap<String, u64>,
        size: usize,
    ) -> Self {
        let mut uniq: HashSet<String> = HashSet::new();
        let mut entries: Vec<LexiconEntry> = candidates
            .into_iter()
            .filter_map(|c| {
                let t = c.as_ref().to_string();
                let freq = counts.get(&t).copied().unwrap_or(0);
                (freq > 0 && uniq.insert(t.clone())).then_some(LexiconEntry { token: t, freq })
            })
            .collect();
        Self::rank(&mut entries, size);
        Self { entries }
    }

    /// Every non-stopword vocabulary token ranked by training frequency.
    pub fn from_vocabulary(vocab: &Vocabulary, counts: &HashMap<String, u64>, size: usize) -> Self {
        let words = vocab.words().map(|(_, w)| w).filter(|w| !is_stopword(w));
        Self::from_candidates(words, counts, size)
    }

    /// Uses the frequencies stored in the file as given.
    pub fn from_entries(mut entries: Vec<LexiconEntry>, size: usize) -> Result<Self> {
        let mut uniq = HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !uniq.insert(e.token.as_str())) {
            return Err(Error::Data(format!("duplicate lexicon token {:?}", dup.token)));
        }
        Self::rank(&mut entries, size);
        Ok(Self { entries })
    }

    fn rank(entries: &mut Vec<LexiconEntry>, size: usize) {
        entries.sort_by(|a, b| b.freq.cmp(&a.freq).then_with(|| a.token.cmp(&b.token)));
        entries.truncate(size);
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.iter().any(|e| e.token == token)
    }

    /// Vocabulary ids of the lexicon tokens; out-of-vocabulary tokens are skipped.
    pub fn token_ids(&self, vocab: &Vocabulary) -> HashSet<TokenId> {
        self.entries.iter().filter_map(|e| vocab.get(&e.token)).collect()
    }

    /// Parses `token[\tfreq]` lines; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Vec<(String, Option<u64>)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let token = parts.next().unwrap_or_default().trim().to_string();
            let freq = match parts.next() {
                Some(f) => Some(
                    f.trim()
                        .parse::<u64>()
                        .map_err(|e| Error::Data(format!("lexicon line {}: bad frequency {f:?}: {e}", i + 1)))?,
                ),
                None => None,
            };
            if token.is_empty() || parts.next().is_some() {
                return Err(Error::Data(format!("lexicon line {}: malformed", i + 1)));
            }
            out.push((token, freq));
        }
        Ok(out)
    }

    /// Loads a candidate file. Training counts, when given, re-rank it;
    /// otherwise every line must carry a frequency.
    pub fn load(path: &Path, counts: Option<&HashMap<String, u64>>, size: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let parsed = Self::parse(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        match counts {
            Some(c) => Ok(Self::from_candidates(parsed.into_iter().map(|(t, _)| t), c, size)),
            None => {
                let entries = parsed
                    .into_iter()
                    .map(|(token, freq)| {
                        freq.map(|freq| LexiconEntry {
                            token: token.clone(),
                            freq,
                        })
                        .ok_or_else(|| Error::Data(format!("lexicon token {token:?} has no frequency")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::from_entries(entries, size)
            }
        }
    }

    pub fn to_file_string(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.token, e.freq))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

/// `|Q_g ∩ Q_gt| / |Q_gt|` over object tokens; 1 when the gold paragraph
/// mentions no objects.
pub fn coverage_reward<T: Hash + Eq>(generated: &[T], gold: &[T], objects: &HashSet<T>) -> f64 {
    let q_gt: HashSet<&T> = gold.iter().filter(|t| objects.contains(t)).collect();
    if q_gt.is_empty() {
        return 1.0;
    }
    let q_g: HashSet<&T> = generated.iter().filter(|t| objects.contains(t)).collect();
    q_g.intersection(&q_gt).count() as f64 / q_gt.len() as f64
}
