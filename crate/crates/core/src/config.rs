//! Model and training configuration. Defaults are the full-scale settings.

use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Regions per image (M).
    pub regions: usize,
    /// Raw detector feature width (D0).
    pub raw_dim: usize,
    /// Embedded region feature width (D1).
    pub embed_dim: usize,
    /// Topic vector width (D2); must equal `(D1 − C1)/C2 + 1`.
    pub topic_dim: usize,
    /// Attention hidden width (D3).
    pub attn_dim: usize,
    /// LSTM hidden width (H), shared by both levels.
    pub hidden: usize,
    /// Word embedding width (D_s).
    pub word_dim: usize,
    /// Convolution filter width along the feature axis (C1).
    pub filter_width: usize,
    /// Convolution stride (C2).
    pub stride: usize,
    /// Maximum sentences per paragraph, also the filter count (K).
    pub max_sentences: usize,
    /// Maximum words per sentence (T_max).
    pub max_words: usize,
    pub beta: f64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub min_count: usize,
    pub lexicon_size: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Share conv filters with the deconv layer (adjoint test mode).
    pub tied_filters: bool,
    pub stop_threshold: f64,
    pub trigram_blocking: bool,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Optional hard cap on optimizer steps per phase.
    pub max_steps_phase1: Option<u64>,
    pub max_steps_phase2: Option<u64>,
    /// Epochs without validation CIDEr gain before phase 1 stops.
    pub patience: usize,
    pub lambda_rec: f64,
    pub lambda_stop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regions: 50,
            raw_dim: 4096,
            embed_dim: 1024,
            topic_dim: 500,
            attn_dim: 512,
            hidden: 1000,
            word_dim: 512,
            filter_width: 26,
            stride: 2,
            max_sentences: 6,
            max_words: 20,
            beta: 8.0,
            lr_phase1: 1e-4,
            lr_phase2: 5e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            min_count: 4,
            lexicon_size: 1000,
            dropout: 0.5,
            batch_norm: true,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            tied_filters: false,
            stop_threshold: 0.5,
            trigram_blocking: true,
            seed: 0,
            batch_size: 8,
            epochs_phase1: 30,
            epochs_phase2: 10,
            max_steps_phase1: None,
            max_steps_phase2: None,
            patience: 5,
            lambda_rec: 1.0,
            lambda_stop: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            regions: self.regions,
            feature_dim: self.embed_dim,
            width: self.filter_width,
            stride: self.stride,
            filters: self.max_sentences,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let dims = [
            ("regions", self.regions),
            ("raw_dim", self.raw_dim),
            ("embed_dim", self.embed_dim),
            ("topic_dim", self.topic_dim),
            ("attn_dim", self.attn_dim),
            ("hidden", self.hidden),
            ("word_dim", self.word_dim),
            ("filter_width", self.filter_width),
            ("stride", self.stride),
            ("max_sentences", self.max_sentences),
            ("max_words", self.max_words),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return err(format!("{name} must be positive"));
        }
        self.geometry().validate().map_err(|e| Error::Config(e.to_string()))?;
        let d2 = self.geometry().out_width();
        if d2 != self.topic_dim {
            return err(format!(
                "topic_dim {} inconsistent with (D1 - C1)/C2 + 1 = {d2}",
                self.topic_dim
            ));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return err("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return err(format!("beta {} must be a finite non-negative number", self.beta));
        }
        if self.lambda_rec < 0.0 || self.lambda_stop < 0.0 {
            return err("loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Paragraph-LSTM input width `H + D1 + D_s`.
    pub fn paragraph_input_dim(&self) -> usize {
        self.hidden + self.embed_dim + self.word_dim
    }

    /// Sentence-LSTM input width `D1 + D2 + H`.
    pub fn sentence_input_dim(&self) -> usize {
        self.embed_dim + self.topic_dim + self.hidden
    }
}
