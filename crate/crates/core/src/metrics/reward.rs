//! Combined self-critical reward and the policy-gradient loss.

use super::cider::CiderD;
use super::coverage::coverage_reward;
use crate::error::{Error, Result};
use crate::generator::{Paragraph, TokenId};
use crate::tensor::Var;
use std::collections::HashSet;

/// Rewards of a sampled paragraph and the greedy baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBundle {
    pub coverage: f64,
    pub cider: f64,
    pub combined: f64,
    pub baseline: f64,
}

impl RewardBundle {
    pub fn advantage(&self) -> f64 {
        self.combined - self.baseline
    }
}

/// `β·R^c + R^d`.
pub fn combined_reward(coverage: f64, cider: f64, beta: f64) -> f64 {
    beta * coverage + cider
}

/// Scores generated paragraphs against gold ones by coverage and CIDEr-D.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub cider: CiderD<TokenId>,
    pub objects: HashSet<TokenId>,
    pub beta: f64,
}

/// `(R^c, R^d, R)` of one paragraph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub coverage: f64,
    pub cider: f64,
    pub combined: f64,
}

impl RewardModel {
    pub fn new(cider: CiderD<TokenId>, objects: HashSet<TokenId>, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
        }
        Ok(Self { cider, objects, beta })
    }

    pub fn score(&self, generated: &Paragraph, gold: &Paragraph) -> Score {
        let g = generated.flatten();
        let t = gold.flatten();
        let coverage = coverage_reward(&g, &t, &self.objects);
        let cider = self.cider.score(&g, &[&t]);
        Score {
            coverage,
            cider,
            combined: combined_reward(coverage, cider, self.beta),
        }
    }

    pub fn bundle(&self, sampled: &Paragraph, greedy: &Paragraph, gold: &Paragraph) -> RewardBundle {
        let s = self.score(sampled, gold);
        RewardBundle {
            coverage: s.coverage,
            cider: s.cider,
            combined: s.combined,
            baseline: self.score(greedy, gold).combined,
        }
    }
}

/// `−(R_sample − R_greedy)·Σ log p`; rewards are constants.
pub fn scst_loss<'g>(log_prob: Var<'g>, sampled: f64, baseline: f64) -> Result<Var<'g>> {
    if !log_prob.item().is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: "non-finite sample log-probability".into(),
        });
    }
    Ok(log_prob.scale(-(sampled - baseline))?)
}
