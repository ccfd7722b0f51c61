//! Hard blocking of repeated trigrams during greedy decoding.

use super::vocab::TokenId;
use std::collections::HashSet;

pub type Trigram = [TokenId; 3];

pub fn trigrams(tokens: &[TokenId]) -> impl Iterator<Item = Trigram> + '_ {
    tokens.windows(3).map(|w| [w[0], w[1], w[2]])
}

/// Result of filtering one step's candidate distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub dist: Vec<f64>,
    /// Every non-exempt candidate was blocked, so nothing was removed.
    pub waived: bool,
}

/// Zeroes every candidate that would complete a trigram in `seen` given
/// the last two tokens of `prefix`, then renormalizes. Ids in `exempt`
/// are never blocked. If no probability mass survives the constraint is
/// waived and `dist` is returned unchanged.
pub fn block_repeated_trigram(
    seen: &HashSet<Trigram>,
    prefix: &[TokenId],
    dist: &[f64],
    exempt: &[TokenId],
) -> Filtered {
    let unchanged = || Filtered {
        dist: dist.to_vec(),
        waived: false,
    };
    let [.., a, b] = prefix else {
        return unchanged();
    };
    let mut out = dist.to_vec();
    let mut blocked_any = false;
    for (cand, p) in out.iter_mut().enumerate() {
        let cand = cand as TokenId;
        if !exempt.contains(&cand) && seen.contains(&[*a, *b, cand]) {
            *p = 0.0;
            blocked_any = true;
        }
    }
    if !blocked_any {
        return unchanged();
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return Filtered {
            dist: dist.to_vec(),
            waived: true,
        };
    }
    out.iter_mut().for_each(|p| *p /= total);
    Filtered {
        dist: out,
        waived: false,
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn has_repeated_trigram(tokens_by_sentence: &[Vec<TokenId>]) -> bool {
    let mut seen = HashSet::new();
    tokens_by_sentence
        .iter()
        .flat_map(|s| trigrams(s))
        .any(|t| !seen.insert(t))
}
