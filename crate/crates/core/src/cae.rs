//! Convolutional auto-encoding of region features into topic vectors.
//!
//! Raw detector features are embedded by a linear layer (optionally
//! batch-normalized) into the `M×D1` region feature map. A valid strided
//! convolution with `K` filters of size `M×C1` turns the map into `K`
//! topic vectors of width `D2`; a transposed convolution with the same
//! geometry reconstructs the map for the L1 reconstruction loss. A linear
//! head on each topic predicts CONTINUE/STOP.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, ConvGeometry, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

pub const CONTINUE: usize = 0;
pub const STOP: usize = 1;

/// Whether batch norm uses batch statistics (and dropout is active).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Detector output for one image: `M×D0` features and objectness scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRegionSet {
    pub image_id: String,
    pub features: Tensor,
    pub objectness: Vec<f64>,
}

impl RawRegionSet {
    pub fn new(image_id: impl Into<String>, features: Tensor, objectness: Vec<f64>) -> Result<Self> {
        let (m, _) = features.dims2()?;
        if m != objectness.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} objectness scores",
                m,
                objectness.len()
            )));
        }
        if objectness.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("non-finite objectness score".into()));
        }
        Ok(Self {
            image_id: image_id.into(),
            features,
            objectness,
        })
    }

    pub fn regions(&self) -> usize {
        self.objectness.len()
    }

    pub fn raw_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Sorts rows by descending objectness (stable), then truncates or
    /// zero-pads (objectness 0) to exactly `m` rows.
    pub fn canonicalize(&self, m: usize) -> Result<Self> {
        let d0 = self.raw_dim();
        let mut order: Vec<usize> = (0..self.regions()).collect();
        order.sort_by(|&a, &b| self.objectness[b].total_cmp(&self.objectness[a]));
        order.truncate(m);
        let mut data = Vec::with_capacity(m * d0);
        let mut scores = Vec::with_capacity(m);
        for &i in &order {
            data.extend_from_slice(self.features.row(i));
            scores.push(self.objectness[i]);
        }
        data.resize(m * d0, 0.0);
        scores.resize(m, 0.0);
        Self::new(self.image_id.clone(), Tensor::matrix(m, d0, data)?, scores)
    }

    pub fn is_sorted(&self) -> bool {
        self.objectness.windows(2).all(|w| w[0] >= w[1])
    }
}

/// The embedded `M×D1` region feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureMap {
    pub v: Tensor,
}

/// `K` topic vectors (rows) and their CONTINUE/STOP logits (`K×2`).
#[derive(Debug, Clone, PartialEq)]
pub struct TopicSet {
    pub topics: Tensor,
    pub stop_logits: Tensor,
}

impl TopicSet {
    /// `P(STOP)` for each topic.
    pub fn stop_probs(&self) -> Vec<f64> {
        let k = self.stop_logits.shape()[0];
        (0..k)
            .map(|i| {
                let p = crate::tensor::softmax_slice(self.stop_logits.row(i));
                p[STOP]
            })
            .collect()
    }
}

/// Parameter handles of the auto-encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CaeParams {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub conv_filters: ParamId,
    pub conv_bias: ParamId,
    pub deconv_filters: ParamId,
    pub deconv_bias: ParamId,
    pub stop_w: ParamId,
    pub stop_b: ParamId,
    pub geometry: ConvGeometry,
    pub batch_norm: bool,
    pub bn_eps: f64,
}

/// Tape values of one auto-encoder pass.
pub struct CaeForward<'g> {
    pub v: Var<'g>,
    pub topics: Var<'g>,
    pub stop_logits: Var<'g>,
    pub bn_stats: Option<BatchStats>,
}

impl CaeParams {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let g = cfg.geometry();
        g.validate()?;
        let (d0, d1, d2, k, m, c1) = (
            cfg.raw_dim,
            cfg.embed_dim,
            cfg.topic_dim,
            cfg.max_sentences,
            cfg.regions,
            cfg.filter_width,
        );
        let embed_w = store.add_uniform("cae.embed.w", &[d0, d1], d0, rng)?;
        let embed_b = store.add_uniform("cae.embed.b", &[d1], d0, rng)?;
        let bn_gamma = store.add("cae.bn.gamma", Tensor::full(&[d1], 1.0), cfg.batch_norm)?;
        let bn_beta = store.add("cae.bn.beta", Tensor::zeros(&[d1]), cfg.batch_norm)?;
        let bn_mean = store.add("cae.bn.running_mean", Tensor::zeros(&[d1]), false)?;
        let bn_var = store.add("cae.bn.running_var", Tensor::full(&[d1], 1.0), false)?;
        let conv_filters = store.add_uniform("cae.conv.filters", &[k, m, c1], m * c1, rng)?;
        let conv_bias = store.add_uniform("cae.conv.bias", &[k], m * c1, rng)?;
        let deconv_filters = if cfg.tied_filters {
            conv_filters
        } else {
            store.add_uniform("cae.deconv.filters", &[k, m, c1], k * c1, rng)?
        };
        let deconv_bias = store.add_uniform("cae.deconv.bias", &[d1], k * c1, rng)?;
        let stop_w = store.add_uniform("cae.stop.w", &[d2, 2], d2, rng)?;
        let stop_b = store.add_uniform("cae.stop.b", &[2], d2, rng)?;
        Ok(Self {
            embed_w,
            embed_b,
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
            conv_filters,
            conv_bias,
            deconv_filters,
            deconv_bias,
            stop_w,
            stop_b,
            geometry: g,
            batch_norm: cfg.batch_norm,
            bn_eps: cfg.bn_eps,
        })
    }

    /// Linear embedding (plus batch norm) of raw features: `M×D0 → M×D1`.
    pub fn embed<'g>(&self, g: &'g Graph, raw: &RawRegionSet, mode: Mode) -> Result<(Var<'g>, Option<BatchStats>)> {
        let w = g.param(self.embed_w);
        let d0 = g.store().get(self.embed_w).tensor.shape()[0];
        if raw.raw_dim() != d0 || raw.regions() != self.geometry.regions {
            return Err(Error::Data(format!(
                "image {}: expected {}x{} features, got {}x{}",
                raw.image_id,
                self.geometry.regions,
                d0,
                raw.regions(),
                raw.raw_dim()
            )));
        }
        let x = g.constant(raw.features.detached());
        let lin = x.matmul(w)?.add_row_vector(g.param(self.embed_b))?;
        if !self.batch_norm {
            return Ok((lin, None));
        }
        let gamma = g.param(self.bn_gamma);
        let beta = g.param(self.bn_beta);
        match mode {
            Mode::Train => {
                let (y, stats) = lin.batch_norm_train(gamma, beta, self.bn_eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let store = g.store();
                let y = lin.batch_norm_eval(
                    gamma,
                    beta,
                    store.get(self.bn_mean).tensor.data(),
                    store.get(self.bn_var).tensor.data(),
                    self.bn_eps,
                )?;
                Ok((y, None))
            }
        }
    }

    /// Convolutional encoder: `M×D1 → K×D2`.
    pub fn encode<'g>(&self, g: &'g Graph, v: Var<'g>) -> Result<Var<'g>> {
        Ok(v.conv(g.param(self.conv_filters), g.param(self.conv_bias), self.geometry)?)
    }

    /// Deconvolutional decoder: `K×D2 → M×D1`.
    pub fn decode<'g>(&self, g: &'g Graph, topics: Var<'g>) -> Result<Var<'g>> {
        Ok(topics.deconv(
            g.param(self.deconv_filters),
            Some(g.param(self.deconv_bias)),
            self.geometry,
        )?)
    }

    /// `K×2` CONTINUE/STOP logits from the topic rows.
    pub fn stop_head<'g>(&self, g: &'g Graph, topics: Var<'g>) -> Result<Var<'g>> {
        Ok(topics
            .matmul(g.param(self.stop_w))?
            .add_row_vector(g.param(self.stop_b))?)
    }

    pub fn forward<'g>(&self, g: &'g Graph, raw: &RawRegionSet, mode: Mode) -> Result<CaeForward<'g>> {
        let (v, bn_stats) = self.embed(g, raw, mode)?;
        let topics = self.encode(g, v)?;
        let stop_logits = self.stop_head(g, topics)?;
        Ok(CaeForward {
            v,
            topics,
            stop_logits,
            bn_stats,
        })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats, momentum: f64) {
        for (id, obs) in [(self.bn_mean, &stats.mean), (self.bn_var, &stats.var)] {
            for (r, o) in store.get_mut(id).tensor.data_mut().iter_mut().zip(obs) {
                *r = momentum * *r + (1.0 - momentum) * o;
            }
        }
    }

    pub fn embed_regions(&self, store: &ParamStore, raw: &RawRegionSet, mode: Mode) -> Result<RegionFeatureMap> {
        let g = Graph::new(store);
        let (v, _) = self.embed(&g, raw, mode)?;
        Ok(RegionFeatureMap { v: v.value() })
    }

    pub fn conv_encode(&self, store: &ParamStore, v: &RegionFeatureMap) -> Result<TopicSet> {
        let g = Graph::new(store);
        let topics = self.encode(&g, g.constant(v.v.detached()))?;
        let stop = self.stop_head(&g, topics)?;
        Ok(TopicSet {
            topics: topics.value(),
            stop_logits: stop.value(),
        })
    }

    pub fn deconv_decode(&self, store: &ParamStore, topics: &TopicSet) -> Result<Tensor> {
        let g = Graph::new(store);
        Ok(self.decode(&g, g.constant(topics.topics.detached()))?.value())
    }
}

/// `‖recon − v‖₁`.
pub fn reconstruction_loss<'g>(recon: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    Ok(recon.l1_distance(v)?)
}

/// Per-topic `P(STOP)`.
pub fn predict_stop(topics: &TopicSet) -> Vec<f64> {
    topics.stop_probs()
}
