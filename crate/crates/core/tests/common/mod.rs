//! Test-side oracles and fixtures. The oracles are deliberately naive and
//! share no code with the library.

#![allow(dead_code)]

use cae_lstm::corpus::{synthesize_dataset, SynthSpec};
use cae_lstm::generator::Vocabulary;
use cae_lstm::metrics::ObjectLexicon;
use cae_lstm::train::{build_lexicon, build_train_vocab, prepare_data, tokenize_records, train_counts, TrainingData};
use cae_lstm::TrainConfig;
use std::collections::{BTreeMap, BTreeSet};

/// Direct summation of the strided valid convolution:
/// `out[k][j] = b[k] + Σ_m Σ_c F[k][m][c] · V[m][j·s + c]`.
pub fn conv_oracle(v: &[Vec<f64>], filters: &[Vec<Vec<f64>>], bias: &[f64], stride: usize) -> Vec<Vec<f64>> {
    let d1 = v[0].len();
    let c1 = filters[0][0].len();
    let d2 = (d1 - c1) / stride + 1;
    let mut out = vec![vec![0.0; d2]; filters.len()];
    for (k, fk) in filters.iter().enumerate() {
        for (j, o) in out[k].iter_mut().enumerate() {
            let mut acc = bias[k];
            for (m, fm) in fk.iter().enumerate() {
                for (c, f) in fm.iter().enumerate() {
                    acc += f * v[m][j * stride + c];
                }
            }
            *o = acc;
        }
    }
    out
}

/// Transposed convolution by explicit scatter.
pub fn deconv_oracle(t: &[Vec<f64>], filters: &[Vec<Vec<f64>>], d1: usize, stride: usize) -> Vec<Vec<f64>> {
    let m_rows = filters[0].len();
    let mut out = vec![vec![0.0; d1]; m_rows];
    for (k, fk) in filters.iter().enumerate() {
        for (j, tv) in t[k].iter().enumerate() {
            for (m, fm) in fk.iter().enumerate() {
                for (c, f) in fm.iter().enumerate() {
                    out[m][j * stride + c] += f * tv;
                }
            }
        }
    }
    out
}

pub fn coverage_oracle(generated: &[u32], gold: &[u32], objects: &[u32]) -> f64 {
    let mut in_gold = 0usize;
    let mut in_both = 0usize;
    let mut seen = Vec::new();
    for &o in objects {
        if seen.contains(&o) {
            continue;
        }
        seen.push(o);
        if gold.contains(&o) {
            in_gold += 1;
            if generated.contains(&o) {
                in_both += 1;
            }
        }
    }
    if in_gold == 0 {
        1.0
    } else {
        in_both as f64 / in_gold as f64
    }
}

fn grams(words: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if words.len() >= n {
        for i in 0..=words.len() - n {
            *out.entry(words[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// CIDEr-D as in the reference COCO scorer: document frequencies over the
/// given per-image reference sets, `log(max(1, df))`, bigram-count length,
/// sigma 6, clipped numerator, mean over orders 1..4 and references, times 10.
pub struct CiderOracle {
    df: BTreeMap<String, f64>,
    log_n: f64,
}

impl CiderOracle {
    pub fn new(corpus: &[Vec<Vec<String>>]) -> Self {
        let mut df = BTreeMap::new();
        for refs in corpus {
            let mut seen = BTreeSet::new();
            for r in refs {
                for n in 1..=4 {
                    seen.extend(grams(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Self {
            df,
            log_n: (corpus.len() as f64).ln(),
        }
    }

    fn vec(&self, words: &[String]) -> (Vec<BTreeMap<String, f64>>, Vec<f64>, f64) {
        let mut vecs = Vec::new();
        let mut norms = Vec::new();
        let mut length = 0.0;
        for n in 1..=4 {
            let mut v = BTreeMap::new();
            let mut sq = 0.0;
            for (g, tf) in grams(words, n) {
                if n == 2 {
                    length += tf;
                }
                let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
                let w = tf * (self.log_n - df.ln());
                sq += w * w;
                v.insert(g, w);
            }
            vecs.push(v);
            norms.push(sq.sqrt());
        }
        (vecs, norms, length)
    }

    pub fn score(&self, candidate: &[String], refs: &[Vec<String>]) -> f64 {
        if candidate.is_empty() || refs.is_empty() {
            return 0.0;
        }
        let (hv, hn, hl) = self.vec(candidate);
        let mut sum = [0.0; 4];
        for r in refs {
            let (rv, rn, rl) = self.vec(r);
            let delta = hl - rl;
            for n in 0..4 {
                let mut val = 0.0;
                for (g, h) in &hv[n] {
                    if let Some(x) = rv[n].get(g) {
                        val += h.min(*x) * x;
                    }
                }
                if hn[n] != 0.0 && rn[n] != 0.0 {
                    val /= hn[n] * rn[n];
                }
                sum[n] += val * (-(delta * delta) / 72.0).exp();
            }
        }
        sum.iter().sum::<f64>() / 4.0 / refs.len() as f64 * 10.0
    }
}

/// Unsmoothed corpus BLEU-4 with the closest reference length (shorter on
/// ties) and brevity penalty `exp(1 − r/c)` when `c ≤ r`.
pub fn bleu_oracle(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let mut matched = [0.0; 4];
    let mut total = [0.0; 4];
    let (mut c, mut r) = (0.0, 0.0);
    for (cand, refs) in pairs {
        c += cand.len() as f64;
        let mut best: Option<usize> = None;
        for x in refs {
            let l = x.len();
            best = match best {
                None => Some(l),
                Some(b) => {
                    let (db, dl) = (b.abs_diff(cand.len()), l.abs_diff(cand.len()));
                    Some(if dl < db || (dl == db && l < b) { l } else { b })
                }
            };
        }
        r += best.unwrap_or(0) as f64;
        for n in 1..=4 {
            let cg = grams(cand, n);
            for (g, cnt) in &cg {
                let max_ref = refs
                    .iter()
                    .map(|x| grams(x, n).get(g).copied().unwrap_or(0.0))
                    .fold(0.0, f64::max);
                matched[n - 1] += cnt.min(max_ref);
                total[n - 1] += cnt;
            }
        }
    }
    if c == 0.0 || matched.contains(&0.0) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        log_sum += (matched[n] / total[n]).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

/// Small model dimensions shared by the training tests.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        regions: 12,
        raw_dim: 16,
        embed_dim: 16,
        topic_dim: 6,
        filter_width: 6,
        stride: 2,
        attn_dim: 16,
        hidden: 32,
        word_dim: 16,
        dropout: 0.0,
        lr_phase1: 5e-3,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

pub struct Corpus {
    pub data: TrainingData,
    pub vocab: Vocabulary,
    pub lexicon: ObjectLexicon,
}

pub fn corpus(spec: &SynthSpec, cfg: &TrainConfig) -> Corpus {
    let synth = synthesize_dataset(spec).unwrap();
    let features: BTreeMap<_, _> = synth
        .features
        .iter()
        .map(|f| (f.image_id.clone(), f.canonicalize(cfg.regions).unwrap()))
        .collect();
    let tokens = tokenize_records(&synth.records, cfg).unwrap();
    let vocab = build_train_vocab(&tokens, &synth.split, cfg.min_count as u64).unwrap();
    let counts = train_counts(&tokens, &synth.split).unwrap();
    let lexicon = build_lexicon(&counts, &vocab, Some(&synth.objects), cfg.lexicon_size);
    let data = prepare_data(&synth.records, &features, &synth.split, &vocab, cfg).unwrap();
    Corpus { data, vocab, lexicon }
}
