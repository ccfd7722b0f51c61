//! The two training phases.
//!
//! Each step draws one seed from the trainer's stream and gives batch item
//! `i` the fork `i` of that seed, so per-image work can run in parallel.
//! Per-image gradients come back in batch order and are summed in that
//! order, which keeps parallel and sequential runs bit-identical.

use super::adam::Adam;
use super::checkpoint::{Checkpoint, Progress};
use super::data::{Example, TrainingData};
use super::eval::{evaluate, mean_reward, EvalContext};
use crate::cae::Mode;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::generator::{decode_on_graph, decode_paragraph, teacher_forced, DecodeOptions, Vocabulary};
use crate::metrics::{scst_loss, ObjectLexicon, RewardModel};
use crate::model::CaeLstm;
use crate::parallel::{map_slice, Execution};
use crate::rng::RngStream;
use crate::tensor::{BatchStats, GradBuffer, Graph, ParamStore, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Phase1Stats {
    /// Mean joint loss per image.
    pub loss: f64,
    /// Word cross-entropy per scored token.
    pub xent: f64,
    pub reconstruction: f64,
    pub stop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Phase2Stats {
    pub sample_reward: f64,
    pub baseline_reward: f64,
    pub loss: f64,
}

/// Progress notifications for logging.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Phase1Step {
        step: u64,
        stats: Phase1Stats,
    },
    Phase2Step {
        step: u64,
        stats: Phase2Stats,
    },
    Epoch {
        phase: u8,
        epoch: u64,
        score: Option<f64>,
        improved: bool,
    },
}

pub struct Trainer {
    pub model: CaeLstm,
    pub store: ParamStore,
    pub adam: Adam,
    pub rng: RngStream,
    pub vocab: Vocabulary,
    pub lexicon: ObjectLexicon,
    pub progress: Progress,
    pub exec: Execution,
}

struct Phase1Sample {
    grads: GradBuffer,
    total: f64,
    words: f64,
    tokens: usize,
    reconstruction: f64,
    stop: f64,
    bn: Option<BatchStats>,
}

struct Phase2Sample {
    grads: Option<GradBuffer>,
    reward: f64,
    baseline: f64,
    loss: f64,
}

fn diverged(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

fn adam_for(cfg: &TrainConfig, lr: f64, params: usize) -> Adam {
    Adam::new(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, params)
}

impl Trainer {
    pub fn new(config: &TrainConfig, vocab: Vocabulary, lexicon: ObjectLexicon) -> Result<Self> {
        let (model, store) = CaeLstm::init(config, vocab.len())?;
        let adam = adam_for(config, config.lr_phase1, store.len());
        // Stream 0 initialized the parameters; training draws from its own stream.
        let rng = RngStream::new(config.seed).fork(0);
        Ok(Self {
            progress: Progress {
                phase: 1,
                step: 0,
                epoch: 0,
                rng: rng.state(),
                best_score: None,
                stale_epochs: 0,
            },
            model,
            store,
            adam,
            rng,
            vocab,
            lexicon,
            exec: Execution::default(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = CaeLstm::bind(&ckpt.config, ckpt.vocab.len(), &ckpt.store)?;
        let lr = if ckpt.progress.phase >= 2 {
            ckpt.config.lr_phase2
        } else {
            ckpt.config.lr_phase1
        };
        let adam = ckpt
            .optimizer
            .unwrap_or_else(|| adam_for(&ckpt.config, lr, ckpt.store.len()));
        Ok(Self {
            rng: RngStream::from_state(ckpt.progress.rng),
            model,
            store: ckpt.store,
            adam,
            vocab: ckpt.vocab,
            lexicon: ckpt.lexicon,
            progress: ckpt.progress,
            exec: Execution::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut progress = self.progress.clone();
        progress.rng = self.rng.state();
        Checkpoint {
            config: self.model.config.clone(),
            vocab: self.vocab.clone(),
            lexicon: self.lexicon.clone(),
            store: self.store.clone(),
            optimizer: Some(self.adam.clone()),
            progress,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    /// Switches to self-critical training: fresh Adam moments at the
    /// phase-two learning rate, and a fresh epoch/patience count.
    pub fn begin_phase2(&mut self) {
        if self.progress.phase >= 2 {
            return;
        }
        let cfg = &self.model.config;
        self.adam = adam_for(cfg, cfg.lr_phase2, self.store.len());
        self.progress.phase = 2;
        self.progress.epoch = 0;
        self.progress.best_score = None;
        self.progress.stale_epochs = 0;
    }

    fn apply(&mut self, parts: impl IntoIterator<Item = GradBuffer>, batch: usize) {
        let mut total = GradBuffer::empty(self.store.len());
        for g in parts {
            total.add_assign(&g);
        }
        total.scale(1.0 / batch as f64);
        self.store.accumulate(&total);
        self.adam.step(&mut self.store);
        self.progress.step += 1;
    }

    /// One teacher-forced step on the joint loss, averaged over images.
    pub fn phase1_step(&mut self, batch: &[&Example]) -> Result<Phase1Stats> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let step = self.progress.step;
        let seed: u64 = self.rng.gen();
        let items: Vec<(u64, &Example)> = batch.iter().enumerate().map(|(i, e)| (i as u64, *e)).collect();
        let (model, store) = (&self.model, &self.store);
        let results = map_slice(self.exec, &items, |&(i, ex)| -> Result<Phase1Sample> {
            let mut rng = RngStream::new(seed).fork(i);
            let g = Graph::new(store);
            let parts = teacher_forced(model, &g, &ex.regions, &ex.gold, Mode::Train, Some(&mut rng))?;
            let total = parts.total(&model.config)?;
            let grads = g.tape.backward(total)?;
            Ok(Phase1Sample {
                grads: g.param_grads(&grads),
                total: total.item(),
                words: parts.words.item(),
                tokens: parts.tokens,
                reconstruction: parts.reconstruction.item(),
                stop: parts.stop.item(),
                bn: parts.bn_stats,
            })
        });
        let samples = results
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(diverged(step))?;
        let n = samples.len() as f64;
        let tokens: usize = samples.iter().map(|s| s.tokens).sum();
        let stats = Phase1Stats {
            loss: samples.iter().map(|s| s.total).sum::<f64>() / n,
            xent: samples.iter().map(|s| s.words).sum::<f64>() / tokens as f64,
            reconstruction: samples.iter().map(|s| s.reconstruction).sum::<f64>() / n,
            stop: samples.iter().map(|s| s.stop).sum::<f64>() / n,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {}", stats.loss),
            });
        }
        let mut grads = Vec::with_capacity(samples.len());
        for s in samples {
            if let Some(bn) = &s.bn {
                self.model
                    .cae
                    .update_running_stats(&mut self.store, bn, self.model.config.bn_momentum);
            }
            grads.push(s.grads);
        }
        self.apply(grads, batch.len());
        Ok(stats)
    }

    /// One self-critical step: the greedy decode is the baseline for a
    /// sampled decode of the same image.
    pub fn phase2_step(&mut self, batch: &[&Example], reward: &RewardModel) -> Result<Phase2Stats> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let step = self.progress.step;
        let seed: u64 = self.rng.gen();
        let items: Vec<(u64, &Example)> = batch.iter().enumerate().map(|(i, e)| (i as u64, *e)).collect();
        let (model, store) = (&self.model, &self.store);
        let greedy_opts = DecodeOptions::greedy(&model.config);
        let sample_opts = DecodeOptions::sample(&model.config);
        let results = map_slice(self.exec, &items, |&(i, ex)| -> Result<Phase2Sample> {
            let mut rng = RngStream::new(seed).fork(i);
            let greedy = decode_paragraph(model, store, &ex.regions, &greedy_opts, None)?;
            let g = Graph::new(store);
            let trace = decode_on_graph(model, &g, &ex.regions, &sample_opts, Some(&mut rng))?;
            let bundle = reward.bundle(&trace.decoded.paragraph, &greedy.paragraph, &ex.gold);
            let log_prob = trace.log_prob.expect("sampling records log-probabilities");
            let loss = scst_loss(log_prob, bundle.combined, bundle.baseline)?;
            let grads = if bundle.advantage() != 0.0 {
                Some(g.param_grads(&g.tape.backward(loss)?))
            } else {
                None
            };
            Ok(Phase2Sample {
                grads,
                reward: bundle.combined,
                baseline: bundle.baseline,
                loss: loss.item(),
            })
        });
        let samples = results
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(diverged(step))?;
        let n = samples.len() as f64;
        let stats = Phase2Stats {
            sample_reward: samples.iter().map(|s| s.reward).sum::<f64>() / n,
            baseline_reward: samples.iter().map(|s| s.baseline).sum::<f64>() / n,
            loss: samples.iter().map(|s| s.loss).sum::<f64>() / n,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {}", stats.loss),
            });
        }
        self.apply(samples.into_iter().filter_map(|s| s.grads), batch.len());
        Ok(stats)
    }

    fn shuffled_batches<'d>(&mut self, examples: &'d [Example]) -> Vec<Vec<&'d Example>> {
        let mut order: Vec<&Example> = examples.iter().collect();
        order.shuffle(&mut self.rng);
        let size = self.model.config.batch_size.max(1);
        order.chunks(size).map(<[_]>::to_vec).collect()
    }

    /// Runs one phase until its epoch budget, step budget or patience is
    /// exhausted, and returns the checkpoint with the best validation score.
    /// Phase one scores by CIDEr-D, phase two by mean combined reward. With
    /// an empty validation split the final state is returned.
    pub fn run_phase(
        &mut self,
        phase: u8,
        data: &TrainingData,
        ctx: &EvalContext,
        on_event: &mut dyn FnMut(&Event),
    ) -> Result<Checkpoint> {
        if phase == 2 {
            self.begin_phase2();
        } else if phase != 1 {
            return Err(Error::Config(format!("unknown phase {phase}")));
        }
        if data.train.is_empty() {
            return Err(Error::Data("the training split is empty".into()));
        }
        let cfg = self.model.config.clone();
        let (epochs, max_steps) = match phase {
            1 => (cfg.epochs_phase1, cfg.max_steps_phase1),
            _ => (cfg.epochs_phase2, cfg.max_steps_phase2),
        };
        let mut best: Option<Checkpoint> = None;
        let mut steps = 0u64;
        'epochs: while self.progress.epoch < epochs as u64 {
            for batch in self.shuffled_batches(&data.train) {
                if max_steps.is_some_and(|m| steps >= m) {
                    break 'epochs;
                }
                if phase == 1 {
                    let stats = self.phase1_step(&batch)?;
                    on_event(&Event::Phase1Step {
                        step: self.progress.step,
                        stats,
                    });
                } else {
                    let stats = self.phase2_step(&batch, &ctx.reward)?;
                    on_event(&Event::Phase2Step {
                        step: self.progress.step,
                        stats,
                    });
                }
                steps += 1;
            }
            self.progress.epoch += 1;
            let score = self.validation_score(phase, data, ctx)?;
            let improved = match (score, self.progress.best_score) {
                (Some(s), Some(b)) => s > b,
                (Some(_), None) => true,
                (None, _) => false,
            };
            on_event(&Event::Epoch {
                phase,
                epoch: self.progress.epoch,
                score,
                improved,
            });
            if improved {
                self.progress.best_score = score;
                self.progress.stale_epochs = 0;
                best = Some(self.checkpoint());
            } else if score.is_some() {
                self.progress.stale_epochs += 1;
                if self.progress.stale_epochs >= cfg.patience as u64 {
                    break;
                }
            }
        }
        Ok(best.unwrap_or_else(|| self.checkpoint()))
    }

    pub fn validation_score(&self, phase: u8, data: &TrainingData, ctx: &EvalContext) -> Result<Option<f64>> {
        if data.val.is_empty() {
            return Ok(None);
        }
        Ok(Some(if phase == 1 {
            evaluate(&self.model, &self.store, &data.val, &self.vocab, ctx, self.exec)?
                .report
                .cider
        } else {
            mean_reward(&self.model, &self.store, &data.val, &ctx.reward, self.exec)?
        }))
    }
}
