use nalgebra::DMatrix;

use super::{CqlConfig, DiscreteActionSet};
use crate::error::{Error, Result};
use crate::nnet::{Activation, AdamState, Gradients, Mlp};
use crate::rng;

/// Upper clamp of the adaptive regularizer weight.
pub const LAGRANGE_MAX: f64 = 1e6;

/// Rows are transitions; `actions` index the learner's action set.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: DMatrix<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: DMatrix<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CqlLossParts {
    pub total: f64,
    pub bellman: f64,
    /// Mean `logsumexp_a Q(s,a) − Q(s, a_data)`.
    pub gap: f64,
    pub mean_q: f64,
    pub min_q: f64,
    pub max_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyLossParts {
    pub loss: f64,
    pub entropy: f64,
}

/// Row-wise `log softmax`.
pub fn log_softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

fn check_finite(v: f64, context: &str, detail: impl FnOnce() -> String) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            context: context.to_string(),
            detail: detail(),
        })
    }
}

/// Q network, its Polyak target and a categorical policy over a discrete
/// action set.
#[derive(Debug, Clone, PartialEq)]
pub struct CqlLearner {
    pub q_net: Mlp,
    pub target_q_net: Mlp,
    pub policy_net: Mlp,
    pub q_adam: AdamState,
    pub policy_adam: AdamState,
    pub actions: DiscreteActionSet,
    pub alpha_tilde: f64,
    pub steps: usize,
}

impl CqlLearner {
    pub fn new(state_dim: usize, actions: DiscreteActionSet, cfg: &CqlConfig) -> Result<Self> {
        cfg.validate()?;
        if state_dim == 0 {
            return Err(Error::Empty("state dimension".into()));
        }
        let mut dims = vec![state_dim];
        dims.extend(&cfg.hidden);
        dims.push(actions.len());
        let mut init = rng::stream(cfg.seed, 0);
        let q_net = Mlp::new(&dims, Activation::Relu, Activation::Identity, &mut init);
        let policy_net = Mlp::new(&dims, Activation::Relu, Activation::Identity, &mut init);
        Ok(Self {
            target_q_net: q_net.clone(),
            q_adam: AdamState::for_mlp(&q_net, cfg.q_lr),
            policy_adam: AdamState::for_mlp(&policy_net, cfg.policy_lr),
            q_net,
            policy_net,
            actions,
            alpha_tilde: cfg.cql_alpha_tilde,
            steps: 0,
        })
    }

    fn check_batch(&self, b: &Batch) -> Result<()> {
        let n = b.len();
        if n == 0 {
            return Err(Error::Empty("batch".into()));
        }
        let d = self.q_net.input_dim();
        if b.states.shape() != (n, d) || b.next_states.shape() != (n, d) || b.rewards.len() != n {
            return Err(Error::DimensionMismatch("batch shapes".into()));
        }
        if b.actions.iter().any(|&a| a >= self.actions.len()) {
            return Err(Error::DimensionMismatch("batch action index out of range".into()));
        }
        Ok(())
    }

    /// Bellman error on the batch against the soft target
    /// `r + γ Σ_a' π(a'|s')(Q̂(s',a') − α log π(a'|s'))`, plus
    /// `α̃ · mean(logsumexp Q(s,·) − Q(s,a))`. Returns the loss and the
    /// Q-network gradients.
    pub fn cql_loss(&self, b: &Batch, cfg: &CqlConfig) -> Result<(CqlLossParts, Gradients)> {
        self.check_batch(b)?;
        let n = b.len();
        let inv = 1.0 / n as f64;
        let cache = self.q_net.forward_cached(&b.states)?;
        let q = cache.output();
        let q_next = self.target_q_net.forward(&b.next_states)?;
        let logp_next = log_softmax_rows(&self.policy_net.forward(&b.next_states)?);

        let mut dq = DMatrix::zeros(n, self.actions.len());
        let (mut bellman, mut gap) = (0.0, 0.0);
        for i in 0..n {
            let v_next: f64 = (0..self.actions.len())
                .map(|j| {
                    let lp = logp_next[(i, j)];
                    lp.exp() * (q_next[(i, j)] - cfg.alpha * lp)
                })
                .sum();
            let y = b.rewards[i] + cfg.gamma * v_next;
            let a = b.actions[i];
            let d = q[(i, a)] - y;
            bellman += d * d * inv;
            dq[(i, a)] += 2.0 * d * inv;

            let row = q.row(i);
            let m = row.max();
            let sum: f64 = row.iter().map(|x| (x - m).exp()).sum();
            gap += (m + sum.ln() - q[(i, a)]) * inv;
            if self.alpha_tilde > 0.0 {
                for j in 0..self.actions.len() {
                    let p = (q[(i, j)] - m).exp() / sum;
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    dq[(i, j)] += self.alpha_tilde * (p - onehot) * inv;
                }
            }
        }
        let total = bellman + self.alpha_tilde * gap;
        check_finite(total, "cql_loss", || {
            format!("bellman {bellman}, gap {gap}, alpha_tilde {}", self.alpha_tilde)
        })?;
        let (grads, _) = self.q_net.backward(&cache, &dq)?;
        Ok((
            CqlLossParts {
                total,
                bellman,
                gap,
                mean_q: q.mean(),
                min_q: q.min(),
                max_q: q.max(),
            },
            grads,
        ))
    }

    /// Entropy-regularized policy loss `E_s Σ_a π(a|s)(α log π(a|s) − Q(s,a))`
    /// by exact enumeration, or cross-entropy on the data actions when `bc`.
    pub fn policy_loss(
        &self,
        b: &Batch,
        cfg: &CqlConfig,
        bc: bool,
    ) -> Result<(PolicyLossParts, Gradients)> {
        self.check_batch(b)?;
        let n = b.len();
        let inv = 1.0 / n as f64;
        let k = self.actions.len();
        let cache = self.policy_net.forward_cached(&b.states)?;
        let logp = log_softmax_rows(cache.output());
        let q = if bc {
            None
        } else {
            Some(self.q_net.forward(&b.states)?)
        };
        let mut dl = DMatrix::zeros(n, k);
        let (mut loss, mut entropy) = (0.0, 0.0);
        for i in 0..n {
            let p: Vec<f64> = (0..k).map(|j| logp[(i, j)].exp()).collect();
            entropy -= (0..k).map(|j| p[j] * logp[(i, j)]).sum::<f64>() * inv;
            match &q {
                None => {
                    let a = b.actions[i];
                    loss -= logp[(i, a)] * inv;
                    for j in 0..k {
                        dl[(i, j)] = (p[j] - if j == a { 1.0 } else { 0.0 }) * inv;
                    }
                }
                Some(q) => {
                    let h: Vec<f64> = (0..k).map(|j| cfg.alpha * logp[(i, j)] - q[(i, j)]).collect();
                    let mean_h: f64 = (0..k).map(|j| p[j] * h[j]).sum();
                    loss += mean_h * inv;
                    for j in 0..k {
                        dl[(i, j)] = p[j] * (h[j] - mean_h) * inv;
                    }
                }
            }
        }
        check_finite(loss, "policy_loss", || format!("entropy {entropy}, bc {bc}"))?;
        let (grads, _) = self.policy_net.backward(&cache, &dl)?;
        Ok((PolicyLossParts { loss, entropy }, grads))
    }

    /// One Q step (with the Lagrange update of `α̃` and the target
    /// averaging) followed by one policy step.
    pub fn update(&mut self, b: &Batch, cfg: &CqlConfig) -> Result<(CqlLossParts, PolicyLossParts)> {
        let (q_parts, q_grads) = self.cql_loss(b, cfg)?;
        self.q_adam.step_mlp(&mut self.q_net, &q_grads)?;
        if cfg.lagrange {
            self.alpha_tilde = (self.alpha_tilde
                + cfg.lagrange_lr * (q_parts.gap - cfg.lagrange_threshold))
                .clamp(0.0, LAGRANGE_MAX);
        }
        self.target_q_net.polyak_update(&self.q_net, cfg.tau);

        let bc = self.steps < cfg.bc_warmup_steps;
        let (p_parts, p_grads) = self.policy_loss(b, cfg, bc)?;
        self.policy_adam.step_mlp(&mut self.policy_net, &p_grads)?;
        self.steps += 1;
        Ok((q_parts, p_parts))
    }

    pub fn q_values(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.q_net.forward(states)
    }

    pub fn policy_probs(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(log_softmax_rows(&self.policy_net.forward(states)?).map(f64::exp))
    }
}
