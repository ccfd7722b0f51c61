//! Two-level LSTM paragraph generator with region attention.
//!
//! For word `t` of sentence `k` the paragraph-level LSTM reads
//! `[h_s(k,t−1), v̄, W_s·w(k,t−1)]`; its output `h_p` and the topic vector
//! `v_k` drive an additive attention over the region rows; the
//! sentence-level LSTM reads `[v̂, v_k, h_p]` and its output feeds the
//! softmax word head. The sentence-level state is zeroed at every
//! sentence start, the paragraph-level state only at paragraph start.

pub mod decode;
pub mod trigram;
pub mod vocab;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

pub use decode::{
    decode_on_graph, decode_paragraph, teacher_forced, DecodeMode, DecodeOptions, DecodeTrace, Decoded, LossParts,
};
pub use trigram::{block_repeated_trigram, Filtered};
pub use vocab::{Paragraph, TokenId, Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `[(input + H) × 4H]`, gate blocks ordered input, forget, output, candidate.
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = input + hidden;
        let w = store.add_uniform(&format!("{name}.w"), &[fan_in, 4 * hidden], fan_in, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), &[4 * hidden], fan_in, rng)?;
        store.get_mut(b).tensor.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|x| *x = 1.0);
        Ok(Self { w, b, input, hidden })
    }

    /// One standard LSTM cell step; returns `(h', c')`.
    pub fn step<'g>(&self, g: &'g Graph, x: Var<'g>, h: Var<'g>, c: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let hd = self.hidden;
        let z = Var::concat(&[x, h], 0)?.matmul(g.param(self.w))?.add(g.param(self.b))?;
        let i = z.slice(0, hd)?.sigmoid()?;
        let f = z.slice(hd, hd)?.sigmoid()?;
        let o = z.slice(2 * hd, hd)?.sigmoid()?;
        let u = z.slice(3 * hd, hd)?.tanh()?;
        let c2 = f.mul(c)?.add(i.mul(u)?)?;
        let h2 = o.mul(c2.tanh()?)?;
        Ok((h2, c2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `W_s`, `|vocab| × D_s`.
    pub word_embed: ParamId,
    pub paragraph_lstm: LstmParams,
    pub sentence_lstm: LstmParams,
    /// `W_att`, `D3`.
    pub att_w: ParamId,
    /// `W_v`, `D1 × D3`.
    pub att_v: ParamId,
    /// `W_h`, `H × D3`.
    pub att_h: ParamId,
    /// `W_t`, `D2 × D3`.
    pub att_t: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub hidden: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

/// Recurrent state of both LSTM levels.
#[derive(Clone, Copy)]
pub struct GeneratorState<'g> {
    pub h_p: Var<'g>,
    pub c_p: Var<'g>,
    pub h_s: Var<'g>,
    pub c_s: Var<'g>,
    pub sentence: usize,
    pub step: usize,
}

/// Per-image quantities reused at every word step.
#[derive(Clone, Copy)]
pub struct ImageContext<'g> {
    pub v: Var<'g>,
    pub v_bar: Var<'g>,
    /// `V · W_v`, `M × D3`.
    pub v_proj: Var<'g>,
}

/// Dropout masks for one word step (training only).
#[derive(Debug, Clone, Default)]
pub struct StepMasks {
    pub attention: Option<Tensor>,
    pub output: Option<Tensor>,
}

pub struct StepOutput<'g> {
    pub log_probs: Var<'g>,
    pub alpha: Var<'g>,
}

impl GeneratorParams {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let (h, d1, d2, d3, ds) = (cfg.hidden, cfg.embed_dim, cfg.topic_dim, cfg.attn_dim, cfg.word_dim);
        let word_embed = store.add_uniform("gen.word_embed", &[vocab_size, ds], vocab_size, rng)?;
        let paragraph_lstm = LstmParams::new(store, "gen.paragraph_lstm", cfg.paragraph_input_dim(), h, rng)?;
        let sentence_lstm = LstmParams::new(store, "gen.sentence_lstm", cfg.sentence_input_dim(), h, rng)?;
        let att_w = store.add_uniform("gen.att.w_att", &[d3], d3, rng)?;
        let att_v = store.add_uniform("gen.att.w_v", &[d1, d3], d1, rng)?;
        let att_h = store.add_uniform("gen.att.w_h", &[h, d3], h, rng)?;
        let att_t = store.add_uniform("gen.att.w_t", &[d2, d3], d2, rng)?;
        let out_w = store.add_uniform("gen.out.w", &[h, vocab_size], h, rng)?;
        let out_b = store.add_uniform("gen.out.b", &[vocab_size], h, rng)?;
        Ok(Self {
            word_embed,
            paragraph_lstm,
            sentence_lstm,
            att_w,
            att_v,
            att_h,
            att_t,
            out_w,
            out_b,
            hidden: h,
            vocab_size,
            dropout: cfg.dropout,
        })
    }

    pub fn context<'g>(&self, g: &'g Graph, v: Var<'g>) -> Result<ImageContext<'g>> {
        Ok(ImageContext {
            v,
            v_bar: v.mean_pool_columns()?,
            v_proj: v.matmul(g.param(self.att_v))?,
        })
    }

    /// All-zero state at the start of a paragraph.
    pub fn initial_state<'g>(&self, g: &'g Graph) -> GeneratorState<'g> {
        let z = || g.constant(Tensor::zeros(&[self.hidden]));
        GeneratorState {
            h_p: z(),
            c_p: z(),
            h_s: z(),
            c_s: z(),
            sentence: 0,
            step: 0,
        }
    }

    /// Zeroes the sentence-level state; the paragraph-level state carries over.
    pub fn start_sentence<'g>(&self, g: &'g Graph, state: &mut GeneratorState<'g>, sentence: usize) {
        state.h_s = g.constant(Tensor::zeros(&[self.hidden]));
        state.c_s = g.constant(Tensor::zeros(&[self.hidden]));
        state.sentence = sentence;
        state.step = 0;
    }

    pub fn step_paragraph_lstm<'g>(
        &self,
        g: &'g Graph,
        state: &mut GeneratorState<'g>,
        ctx: &ImageContext<'g>,
        prev_word: TokenId,
    ) -> Result<Var<'g>> {
        let w = g.param(self.word_embed).row(prev_word as usize)?;
        let x = Var::concat(&[state.h_s, ctx.v_bar, w], 0)?;
        let (h, c) = self.paragraph_lstm.step(g, x, state.h_p, state.c_p)?;
        state.h_p = h;
        state.c_p = c;
        Ok(h)
    }

    /// Attention weights over regions and the attended feature `v̂`.
    pub fn attend<'g>(
        &self,
        g: &'g Graph,
        ctx: &ImageContext<'g>,
        h_p: Var<'g>,
        topic: Var<'g>,
        mask: Option<&Tensor>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let q = h_p
            .matmul(g.param(self.att_h))?
            .add(topic.matmul(g.param(self.att_t))?)?;
        let mut hidden = ctx.v_proj.add_row_vector(q)?.tanh()?;
        if let Some(m) = mask {
            hidden = hidden.mul(g.constant(m.clone()))?;
        }
        let alpha = hidden.matmul(g.param(self.att_w))?.softmax()?;
        let v_hat = alpha.matmul(ctx.v)?;
        Ok((alpha, v_hat))
    }

    /// Sentence-level LSTM step and word head; returns log-probabilities.
    pub fn step_sentence_lstm<'g>(
        &self,
        g: &'g Graph,
        state: &mut GeneratorState<'g>,
        v_hat: Var<'g>,
        topic: Var<'g>,
        h_p: Var<'g>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'g>> {
        let x = Var::concat(&[v_hat, topic, h_p], 0)?;
        let (h, c) = self.sentence_lstm.step(g, x, state.h_s, state.c_s)?;
        state.h_s = h;
        state.c_s = c;
        let h_out = match mask {
            Some(m) => h.mul(g.constant(m.clone()))?,
            None => h,
        };
        Ok(h_out
            .matmul(g.param(self.out_w))?
            .add(g.param(self.out_b))?
            .log_softmax()?)
    }

    /// One full word step.
    pub fn step<'g>(
        &self,
        g: &'g Graph,
        state: &mut GeneratorState<'g>,
        ctx: &ImageContext<'g>,
        topic: Var<'g>,
        prev_word: TokenId,
        masks: &StepMasks,
    ) -> Result<StepOutput<'g>> {
        let h_p = self.step_paragraph_lstm(g, state, ctx, prev_word)?;
        let (alpha, v_hat) = self.attend(g, ctx, h_p, topic, masks.attention.as_ref())?;
        let log_probs = self.step_sentence_lstm(g, state, v_hat, topic, h_p, masks.output.as_ref())?;
        state.step += 1;
        Ok(StepOutput { log_probs, alpha })
    }

    /// Inverted-dropout masks, or none when `rate` is zero or no rng is given.
    pub fn masks(&self, rng: Option<&mut RngStream>, regions: usize, attn_dim: usize) -> StepMasks {
        let Some(rng) = rng else {
            return StepMasks::default();
        };
        if self.dropout <= 0.0 {
            return StepMasks::default();
        }
        StepMasks {
            attention: Some(dropout_mask(rng, &[regions, attn_dim], self.dropout)),
            output: Some(dropout_mask(rng, &[self.hidden], self.dropout)),
        }
    }
}

pub fn dropout_mask(rng: &mut RngStream, shape: &[usize], rate: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("mask shape is valid")
}
