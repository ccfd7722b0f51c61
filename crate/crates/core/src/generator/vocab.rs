use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Dense token ↔ id map. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.tokens.len() < SPECIALS.len() || f.tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        Self::from_words(f.tokens[SPECIALS.len()..].iter().cloned())
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-special words in id order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            if index.contains_key(&w) {
                return Err(Error::Data(format!("duplicate vocabulary token {w:?}")));
            }
            index.insert(w.clone(), tokens.len() as TokenId);
            tokens.push(w);
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn words(&self) -> impl Iterator<Item = (TokenId, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, t)| (i as TokenId, t.as_str()))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// A paragraph as token-id sentences, EOS excluded.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Paragraph {
    pub sentences: Vec<Vec<TokenId>>,
}

impl Paragraph {
    pub fn new(sentences: Vec<Vec<TokenId>>) -> Self {
        Self { sentences }
    }

    pub fn from_tokens<S: AsRef<str>>(vocab: &Vocabulary, sentences: &[Vec<S>]) -> Self {
        Self {
            sentences: sentences.iter().map(|s| vocab.encode(s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// All tokens as one sequence, the unit scored by the metrics.
    pub fn flatten(&self) -> Vec<TokenId> {
        self.sentences.concat()
    }

    /// Sentences joined as `"w w w. w w."`.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.sentence_strings(vocab)
            .into_iter()
            .filter(|s| !s.is_empty())
            .map(|s| format!("{s}."))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn sentence_strings(&self, vocab: &Vocabulary) -> Vec<String> {
        self.sentences.iter().map(|s| vocab.decode(s).join(" ")).collect()
    }
}
