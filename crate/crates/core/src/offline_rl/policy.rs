use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{CqlConfig, CqlLearner, DiscreteActionSet};
use crate::container::{self, POLICY_MAGIC};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::koopman::{BlockSpec, MlpArch};
use crate::nnet::Mlp;
use crate::rng;
use crate::symmetry::AugmentConfig;

/// Episode cap of [`evaluate_policy`].
pub const DEFAULT_MAX_STEPS: usize = 1000;

pub trait Policy {
    /// Physical action for state `s`.
    fn act(&self, s: &[f64]) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> Vec<f64>> Policy for F {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        self(s)
    }
}

/// Greedy policy over the logits of a policy network.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    pub net: Mlp,
    pub actions: DiscreteActionSet,
}

impl CategoricalPolicy {
    pub fn from_learner(l: &CqlLearner) -> Self {
        Self {
            net: l.policy_net.clone(),
            actions: l.actions.clone(),
        }
    }

    /// Index of the largest logit (lowest index on ties).
    pub fn greedy_index(&self, s: &[f64]) -> usize {
        let logits = self
            .net
            .forward(&DMatrix::from_row_slice(1, s.len(), s))
            .expect("state dimension checked by caller");
        let mut best = 0;
        for j in 1..logits.ncols() {
            if logits[(0, j)] > logits[(0, best)] {
                best = j;
            }
        }
        best
    }
}

impl Policy for CategoricalPolicy {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        self.actions.action(self.greedy_index(s)).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
}

/// Rollouts from seeded `env.reset` states. Each step earns 1, the
/// terminating step included; episodes stop at termination or `max_steps`.
pub fn evaluate_policy<E: Env, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    episodes: usize,
    seed: u64,
    max_steps: usize,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::Empty("evaluation needs at least one episode".into()));
    }
    let returns: Vec<f64> = (0..episodes)
        .map(|ep| {
            let mut rng = rng::stream(seed, ep as u64);
            let mut s = env.reset(&mut rng);
            let mut ret = 0.0;
            for _ in 0..max_steps {
                let a = policy.act(&s);
                s = env.step(&s, &a);
                ret += 1.0;
                if env.is_terminal(&s) {
                    break;
                }
            }
            ret
        })
        .collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(EvalResult {
        mean_return: mean,
        std_return: var.sqrt(),
        returns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyHeader {
    state_dim: usize,
    actions: Vec<Vec<f64>>,
    policy: MlpArch,
    q: MlpArch,
    alpha_tilde: f64,
    steps: usize,
    cql_config: CqlConfig,
    augment_config: AugmentConfig,
    blocks: Vec<BlockSpec>,
}

/// Trained policy and Q network with the configs that produced them
/// (`KFP1` files).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub policy: CategoricalPolicy,
    pub q_net: Mlp,
    pub alpha_tilde: f64,
    pub steps: usize,
    pub cql_config: CqlConfig,
    pub augment_config: AugmentConfig,
}

fn arch(m: &Mlp) -> MlpArch {
    MlpArch {
        layer_dims: m.layer_dims(),
        activations: m.activations(),
    }
}

impl PolicyCheckpoint {
    pub fn from_learner(l: &CqlLearner, cql: &CqlConfig, aug: &AugmentConfig) -> Self {
        Self {
            policy: CategoricalPolicy::from_learner(l),
            q_net: l.q_net.clone(),
            alpha_tilde: l.alpha_tilde,
            steps: l.steps,
            cql_config: cql.clone(),
            augment_config: aug.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let p = self.policy.net.params_flat();
        let q = self.q_net.params_flat();
        let header = PolicyHeader {
            state_dim: self.policy.net.input_dim(),
            actions: self.policy.actions.actions.clone(),
            policy: arch(&self.policy.net),
            q: arch(&self.q_net),
            alpha_tilde: self.alpha_tilde,
            steps: self.steps,
            cql_config: self.cql_config.clone(),
            augment_config: self.augment_config.clone(),
            blocks: vec![BlockSpec::new("policy", p.len()), BlockSpec::new("q", q.len())],
        };
        container::write_container(w, POLICY_MAGIC, &header, &[&p, &q])
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (h, _): (PolicyHeader, u64) = container::read_preamble(r, POLICY_MAGIC)?;
        let mut policy = h.policy.build()?;
        let mut q_net = h.q.build()?;
        let expected = vec![
            BlockSpec::new("policy", policy.num_params()),
            BlockSpec::new("q", q_net.num_params()),
        ];
        if h.blocks != expected || policy.input_dim() != h.state_dim {
            return Err(Error::Header("policy block table does not match architecture".into()));
        }
        let p = container::read_f64s(r, policy.num_params(), "policy")?;
        let q = container::read_f64s(r, q_net.num_params(), "q")?;
        container::expect_eof(r)?;
        if p.iter().chain(&q).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        policy.set_params_flat(&p)?;
        q_net.set_params_flat(&q)?;
        let actions = DiscreteActionSet::new(h.actions)?;
        if actions.len() != policy.output_dim() {
            return Err(Error::Header("action count does not match policy head".into()));
        }
        Ok(Self {
            policy: CategoricalPolicy {
                net: policy,
                actions,
            },
            q_net,
            alpha_tilde: h.alpha_tilde,
            steps: h.steps,
            cql_config: h.cql_config,
            augment_config: h.augment_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
