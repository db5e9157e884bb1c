//! TOML run configuration. Every section is optional and every field falls
//! back to its default; command-line flags override the file.

use std::path::Path;

use kfc_core::offline_rl::CqlConfig;
use kfc_core::{AugmentConfig, KoopmanTrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub env: String,
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
    /// Only read for the synthetic environment.
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            env: kfc_core::envs::CARTPOLE_NAME.into(),
            episodes: 100,
            steps: 1000,
            seed: 0,
            state_dim: 4,
            action_dim: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
    /// Rollouts used to score a trained policy.
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            seed: 0,
            episodes: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub collect: CollectConfig,
    pub koopman: KoopmanTrainConfig,
    pub augment: AugmentConfig,
    pub cql: CqlConfig,
    pub eval: EvalConfig,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}

/// Overwrite `target` with `value` when the flag was given.
pub fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let c = FileConfig::parse("[cql]\ngamma = 0.9\n[collect]\nepisodes = 3\n").unwrap();
        assert_eq!(c.cql.gamma, 0.9);
        assert_eq!(c.cql.batch_size, CqlConfig::default().batch_size);
        assert_eq!(c.collect.episodes, 3);
        assert_eq!(c.collect.steps, 1000);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(matches!(
            FileConfig::parse("[collect]\nepisode = 3\n"),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn flags_override() {
        let mut x = 1;
        set(&mut x, None);
        assert_eq!(x, 1);
        set(&mut x, Some(5));
        assert_eq!(x, 5);
    }
}
