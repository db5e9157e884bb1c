//! Simulated environments, the cart-pole expert and the ΔS/ΔE evaluator.

mod cartpole;
mod fidelity;
mod synthetic;

use rand::Rng;

pub use cartpole::{
    collect, expert_action, physical_action, CartpoleEnv, CartpoleParams, CollectStats,
    ExpertPolicyConfig, CARTPOLE_NAME,
};
pub use fidelity::{
    fidelity_eval, FidelityReport, FidelityRow, FidelitySummary, Histogram, MatchedGaussian,
    MATCH_TOLERANCE,
};
pub use synthetic::{SyntheticBilinearEnv, STABILITY_LIMIT, SYNTHETIC_NAME};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Deterministic environment with an explicitly settable state.
pub trait Env {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn position_indices(&self) -> Vec<usize>;
    fn velocity_indices(&self) -> Vec<usize>;
    /// Pure one-step transition; no termination handling.
    fn step(&self, s: &[f64], a: &[f64]) -> Vec<f64>;
    fn is_terminal(&self, s: &[f64]) -> bool;
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>;
}

/// Any built-in environment, selected by name.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyEnv {
    Cartpole(CartpoleEnv),
    Synthetic(SyntheticBilinearEnv),
}

impl AnyEnv {
    /// The environment a dataset was collected on, rebuilt from its
    /// provenance (name, seed and dimensions).
    pub fn for_dataset(ds: &Dataset) -> Result<Self> {
        Self::by_name(&ds.env_name, ds.state_dim, ds.action_dim, ds.seed)
    }

    pub fn by_name(name: &str, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        match name {
            CARTPOLE_NAME => Ok(AnyEnv::Cartpole(CartpoleEnv::default())),
            SYNTHETIC_NAME => Ok(AnyEnv::Synthetic(SyntheticBilinearEnv::random(
                state_dim, action_dim, seed,
            )?)),
            other => Err(Error::Config(format!("unknown environment {other:?}"))),
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::Cartpole($e) => $body,
            AnyEnv::Synthetic($e) => $body,
        }
    };
}

impl Env for AnyEnv {
    fn name(&self) -> &str {
        dispatch!(self, e => e.name())
    }
    fn state_dim(&self) -> usize {
        dispatch!(self, e => e.state_dim())
    }
    fn action_dim(&self) -> usize {
        dispatch!(self, e => e.action_dim())
    }
    fn position_indices(&self) -> Vec<usize> {
        dispatch!(self, e => e.position_indices())
    }
    fn velocity_indices(&self) -> Vec<usize> {
        dispatch!(self, e => e.velocity_indices())
    }
    fn step(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        dispatch!(self, e => e.step(s, a))
    }
    fn is_terminal(&self, s: &[f64]) -> bool {
        dispatch!(self, e => e.is_terminal(s))
    }
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        dispatch!(self, e => e.reset(rng))
    }
}
