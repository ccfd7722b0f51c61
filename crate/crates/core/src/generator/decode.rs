//! Paragraph decoding (greedy or sampled) and the teacher-forced loss.

use super::trigram::{argmax, block_repeated_trigram, Trigram};
use super::vocab::{Paragraph, TokenId, BOS, EOS, PAD};
use super::StepMasks;
use crate::cae::{reconstruction_loss, Mode, RawRegionSet, CONTINUE, STOP};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::CaeLstm;
use crate::rng::RngStream;
use crate::tensor::{softmax_slice, BatchStats, Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub trigram_blocking: bool,
    pub max_sentences: usize,
    pub max_words: usize,
    pub stop_threshold: f64,
    pub record_attention: bool,
    /// Batch statistics and dropout instead of running statistics.
    pub train: bool,
}

impl DecodeOptions {
    pub fn greedy(cfg: &TrainConfig) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            trigram_blocking: cfg.trigram_blocking,
            max_sentences: cfg.max_sentences,
            max_words: cfg.max_words,
            stop_threshold: cfg.stop_threshold,
            record_attention: false,
            train: false,
        }
    }

    pub fn sample(cfg: &TrainConfig) -> Self {
        Self {
            mode: DecodeMode::Sample,
            trigram_blocking: false,
            ..Self::greedy(cfg)
        }
    }
}

/// Everything a decode produced, detached from the tape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Decoded {
    pub image_id: String,
    pub paragraph: Paragraph,
    /// `P(STOP)` after each emitted sentence.
    pub stop_probs: Vec<f64>,
    /// Some step had every candidate blocked and the trigram rule was lifted.
    pub waiver_fired: bool,
    /// Per sentence, per word, the attention weights over regions.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Max-abs of `(h_s, h_p)` just before the first word of each sentence.
    pub sentence_start_norms: Vec<(f64, f64)>,
}

pub struct DecodeTrace<'g> {
    pub decoded: Decoded,
    /// Log-probability of every sampled word and stop decision (sample mode).
    pub log_prob: Option<Var<'g>>,
    pub bn_stats: Option<BatchStats>,
}

/// Teacher-forced loss terms for one image.
pub struct LossParts<'g> {
    /// Summed word negative log-likelihood.
    pub words: Var<'g>,
    /// Summed CONTINUE/STOP cross-entropy.
    pub stop: Var<'g>,
    pub reconstruction: Var<'g>,
    /// Number of scored word targets, EOS included.
    pub tokens: usize,
    pub bn_stats: Option<BatchStats>,
}

impl<'g> LossParts<'g> {
    /// `L_xe + λ_rec·L_rec + λ_stop·L_stop`.
    pub fn total(&self, cfg: &TrainConfig) -> Result<Var<'g>> {
        Ok(self
            .words
            .add(self.reconstruction.scale(cfg.lambda_rec)?)?
            .add(self.stop.scale(cfg.lambda_stop)?)?)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn draw(rng: &mut RngStream, dist: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Runs the auto-encoder once, then emits up to `max_sentences` sentences.
///
/// PAD and BOS are never emitted, and EOS is not allowed as the first word
/// of a sentence; the word distribution is renormalized over the rest. In
/// sample mode an rng is required and the log-probability of each sampled
/// word (under the renormalized distribution) and of each stop decision is
/// accumulated on the tape.
pub fn decode_on_graph<'g>(
    model: &CaeLstm,
    g: &'g Graph,
    raw: &RawRegionSet,
    opts: &DecodeOptions,
    mut rng: Option<&mut RngStream>,
) -> Result<DecodeTrace<'g>> {
    let sample = opts.mode == DecodeMode::Sample;
    if sample && rng.is_none() {
        return Err(Error::Config("sampled decoding needs an rng".into()));
    }
    let cap = opts.max_sentences.min(model.config.max_sentences);
    if cap == 0 || opts.max_words == 0 {
        return Err(Error::Config("decode caps must be positive".into()));
    }
    let mode = if opts.train { Mode::Train } else { Mode::Eval };
    let cae = model.cae.forward(g, raw, mode)?;
    let gen = &model.gen;
    let ctx = gen.context(g, cae.v)?;
    let mut state = gen.initial_state(g);
    let mut log_prob: Option<Var<'g>> = None;
    let mut add_lp = |lp: Var<'g>| -> Result<()> {
        log_prob = Some(match log_prob {
            Some(acc) => acc.add(lp)?,
            None => lp,
        });
        Ok(())
    };
    let mut out = Decoded {
        image_id: raw.image_id.clone(),
        ..Decoded::default()
    };
    let mut seen: HashSet<Trigram> = HashSet::new();

    for k in 0..cap {
        gen.start_sentence(g, &mut state, k);
        out.sentence_start_norms
            .push((max_abs(&state.h_s.to_vec()), max_abs(&state.h_p.to_vec())));
        let topic = cae.topics.row(k)?;
        let mut sentence: Vec<TokenId> = Vec::new();
        let mut attention = Vec::new();
        let mut prev = BOS;
        for t in 0..opts.max_words {
            let masks = if opts.train {
                gen.masks(rng.as_deref_mut(), model.config.regions, model.config.attn_dim)
            } else {
                StepMasks::default()
            };
            let step = gen.step(g, &mut state, &ctx, topic, prev, &masks)?;
            if opts.record_attention {
                attention.push(step.alpha.to_vec());
            }
            let lp = step.log_probs.to_vec();
            let forbidden: &[TokenId] = if t == 0 { &[PAD, BOS, EOS] } else { &[PAD, BOS] };
            let mut dist: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
            for &f in forbidden {
                dist[f as usize] = 0.0;
            }
            let mass: f64 = dist.iter().sum();
            if mass <= 0.0 {
                return Err(Error::Diverged {
                    step: 0,
                    detail: format!("image {}: no admissible word", raw.image_id),
                });
            }
            dist.iter_mut().for_each(|p| *p /= mass);

            let w = (if sample {
                let rng = rng.as_deref_mut().expect("checked above");
                let w = draw(rng, &dist);
                // log p(w) − ln(1 − Σ p(forbidden))
                let mut excluded = step.log_probs.pick(forbidden[0] as usize)?.exp()?;
                for &f in &forbidden[1..] {
                    excluded = excluded.add(step.log_probs.pick(f as usize)?.exp()?)?;
                }
                let norm = excluded.scale(-1.0)?.add_scalar(1.0)?.ln()?;
                add_lp(step.log_probs.pick(w)?.sub(norm)?)?;
                w
            } else {
                if opts.trigram_blocking {
                    let f = block_repeated_trigram(&seen, &sentence, &dist, &[EOS]);
                    out.waiver_fired |= f.waived;
                    dist = f.dist;
                }
                argmax(&dist)
            }) as TokenId;
            if w == EOS {
                break;
            }
            sentence.push(w);
            if let [.., a, b, c] = sentence[..] {
                seen.insert([a, b, c]);
            }
            prev = w;
        }
        out.paragraph.sentences.push(sentence);
        if opts.record_attention {
            out.attention.push(attention);
        }

        let logits = cae.stop_logits.row(k)?;
        let p_stop = softmax_slice(&logits.to_vec())[STOP];
        out.stop_probs.push(p_stop);
        if k + 1 == cap {
            break;
        }
        let stop = if sample {
            let rng = rng.as_deref_mut().expect("checked above");
            let stop = rng.gen::<f64>() < p_stop;
            add_lp(logits.log_softmax()?.pick(if stop { STOP } else { CONTINUE })?)?;
            stop
        } else {
            p_stop > opts.stop_threshold
        };
        if stop {
            break;
        }
    }
    Ok(DecodeTrace {
        decoded: out,
        log_prob,
        bn_stats: cae.bn_stats,
    })
}

/// Decodes on a throwaway tape and returns only the values.
pub fn decode_paragraph(
    model: &CaeLstm,
    store: &ParamStore,
    raw: &RawRegionSet,
    opts: &DecodeOptions,
    rng: Option<&mut RngStream>,
) -> Result<Decoded> {
    let g = Graph::new(store);
    Ok(decode_on_graph(model, &g, raw, opts, rng)?.decoded)
}

/// Checks a gold paragraph against the caps and vocabulary.
pub fn validate_gold(gold: &Paragraph, cfg: &TrainConfig, vocab_size: usize) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::Data("empty gold paragraph".into()));
    }
    if gold.len() > cfg.max_sentences {
        return Err(Error::Data(format!(
            "gold paragraph has {} sentences, cap is {}",
            gold.len(),
            cfg.max_sentences
        )));
    }
    for s in &gold.sentences {
        if s.len() > cfg.max_words {
            return Err(Error::Data(format!(
                "gold sentence has {} words, cap is {}",
                s.len(),
                cfg.max_words
            )));
        }
        if let Some(&bad) = s
            .iter()
            .find(|&&w| w == PAD || w == BOS || w == EOS || w as usize >= vocab_size)
        {
            return Err(Error::Data(format!("invalid token id {bad} in gold sentence")));
        }
    }
    Ok(())
}

/// Teacher-forced word NLL, stop cross-entropy and reconstruction loss.
///
/// Each sentence is scored on its words followed by EOS, except that a
/// sentence already at the word cap has no EOS target. The stop head is
/// trained toward CONTINUE for every gold sentence but the last.
pub fn teacher_forced<'g>(
    model: &CaeLstm,
    g: &'g Graph,
    raw: &RawRegionSet,
    gold: &Paragraph,
    mode: Mode,
    mut rng: Option<&mut RngStream>,
) -> Result<LossParts<'g>> {
    let cfg = &model.config;
    validate_gold(gold, cfg, model.vocab_size)?;
    let cae = model.cae.forward(g, raw, mode)?;
    let gen = &model.gen;
    let ctx = gen.context(g, cae.v)?;
    let mut state = gen.initial_state(g);
    let mut words: Option<Var<'g>> = None;
    let mut tokens = 0;
    for (k, sentence) in gold.sentences.iter().enumerate() {
        gen.start_sentence(g, &mut state, k);
        let topic = cae.topics.row(k)?;
        let mut targets = sentence.clone();
        if sentence.len() < cfg.max_words {
            targets.push(EOS);
        }
        let mut prev = BOS;
        for &w in &targets {
            let masks = match (mode, rng.as_deref_mut()) {
                (Mode::Train, Some(r)) => gen.masks(Some(r), cfg.regions, cfg.attn_dim),
                _ => StepMasks::default(),
            };
            let step = gen.step(g, &mut state, &ctx, topic, prev, &masks)?;
            let nll = step.log_probs.pick(w as usize)?.scale(-1.0)?;
            words = Some(match words {
                Some(acc) => acc.add(nll)?,
                None => nll,
            });
            tokens += 1;
            prev = w;
        }
    }
    let mut stop: Option<Var<'g>> = None;
    for k in 0..gold.len() {
        let target = if k + 1 == gold.len() { STOP } else { CONTINUE };
        let nll = cae.stop_logits.row(k)?.log_softmax()?.pick(target)?.scale(-1.0)?;
        stop = Some(match stop {
            Some(acc) => acc.add(nll)?,
            None => nll,
        });
    }
    let recon = model.cae.decode(g, cae.topics)?;
    let reconstruction = reconstruction_loss(recon, cae.v)?;
    Ok(LossParts {
        words: words.expect("at least one target"),
        stop: stop.expect("at least one sentence"),
        reconstruction,
        tokens,
        bn_stats: cae.bn_stats,
    })
}
