//! Discrete-action conservative Q-learning on (optionally augmented) batches.

mod learner;
mod policy;
mod train;

pub use learner::{
    log_softmax_rows, Batch, CqlLearner, CqlLossParts, PolicyLossParts, LAGRANGE_MAX,
};
pub use policy::{
    evaluate_policy, CategoricalPolicy, EvalResult, Policy, PolicyCheckpoint, DEFAULT_MAX_STEPS,
};
pub use train::{train_agent, train_agent_observed, TrainLog, TrainRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CqlConfig {
    pub gamma: f64,
    /// Polyak coefficient of the target network.
    pub tau: f64,
    /// Fixed entropy weight.
    pub alpha: f64,
    /// Initial weight `α̃` of the conservative regularizer.
    pub cql_alpha_tilde: f64,
    /// Adapt `α̃` by gradient ascent on `gap − lagrange_threshold`.
    pub lagrange: bool,
    pub lagrange_threshold: f64,
    pub lagrange_lr: f64,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub batch_size: usize,
    /// Leading steps whose policy update is behavioural cloning.
    pub bc_warmup_steps: usize,
    /// Total gradient steps, warmup included.
    pub train_steps: usize,
    pub hidden: Vec<usize>,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for CqlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 5e-3,
            alpha: 0.2,
            cql_alpha_tilde: 5.0,
            lagrange: true,
            lagrange_threshold: 10.0,
            lagrange_lr: 3e-4,
            policy_lr: 1e-4,
            q_lr: 3e-4,
            batch_size: 256,
            bc_warmup_steps: 2000,
            train_steps: 10_000,
            hidden: vec![64, 64],
            log_every: 100,
            seed: 0,
        }
    }
}

impl CqlConfig {
    /// Network sizes and warmup of the original offline runs.
    pub fn paper_scale() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            bc_warmup_steps: 40_000,
            train_steps: 1_000_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0,1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0,1]", self.tau)));
        }
        let nonneg = [
            ("alpha", self.alpha),
            ("cql_alpha_tilde", self.cql_alpha_tilde),
            ("lagrange_lr", self.lagrange_lr),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(self.policy_lr > 0.0 && self.q_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// The finite action set of a dataset, in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteActionSet {
    pub actions: Vec<Vec<f64>>,
}

impl DiscreteActionSet {
    pub fn new(actions: Vec<Vec<f64>>) -> Result<Self> {
        if actions.len() < 2 {
            return Err(Error::Config(format!(
                "discrete CQL needs at least two actions, found {}",
                actions.len()
            )));
        }
        Ok(Self { actions })
    }

    pub fn from_dataset(ds: &crate::dataset::Dataset) -> Result<Self> {
        Self::new(ds.distinct_actions())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn index_of(&self, a: &[f64]) -> Option<usize> {
        self.actions.iter().position(|x| x.as_slice() == a)
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i]
    }
}
