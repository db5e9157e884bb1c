//! Columnar store of offline transitions and its `KFD1` file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{self, DATASET_MAGIC};
use crate::error::{Error, Result};

pub const CREATOR_VERSION: &str = concat!("kfc ", env!("CARGO_PKG_VERSION"));

/// One offline datum `(s_t, a_t, r_t, s_{t+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTuple {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Header of a dataset file. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_transitions: usize,
    pub position_indices: Vec<usize>,
    pub velocity_indices: Vec<usize>,
    pub env_name: String,
    pub seed: u64,
    pub creator_version: String,
    /// Settings of the run that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub position_indices: Vec<usize>,
    pub velocity_indices: Vec<usize>,
    pub env_name: String,
    pub seed: u64,
    pub creator_version: String,
    pub run_config: Option<serde_json::Value>,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            position_indices: Vec::new(),
            velocity_indices: Vec::new(),
            env_name: String::new(),
            seed: 0,
            creator_version: CREATOR_VERSION.to_string(),
            run_config: None,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
        }
    }

    pub fn with_provenance(
        mut self,
        env_name: &str,
        seed: u64,
        position_indices: Vec<usize>,
        velocity_indices: Vec<usize>,
    ) -> Self {
        self.env_name = env_name.to_string();
        self.seed = seed;
        self.position_indices = position_indices;
        self.velocity_indices = velocity_indices;
        self
    }

    pub fn push(&mut self, t: &TransitionTuple) -> Result<()> {
        if t.state.len() != self.state_dim
            || t.next_state.len() != self.state_dim
            || t.action.len() != self.action_dim
        {
            return Err(Error::DimensionMismatch(format!(
                "tuple dims (s={}, a={}, s'={}) vs dataset (s={}, a={})",
                t.state.len(),
                t.action.len(),
                t.next_state.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        self.states.extend_from_slice(&t.state);
        self.actions.extend_from_slice(&t.action);
        self.rewards.push(t.reward);
        self.next_states.extend_from_slice(&t.next_state);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    pub fn tuple(&self, i: usize) -> TransitionTuple {
        TransitionTuple {
            state: self.state(i).to_vec(),
            action: self.action(i).to_vec(),
            reward: self.reward(i),
            next_state: self.next_state(i).to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = TransitionTuple> + '_ {
        (0..self.len()).map(|i| self.tuple(i))
    }

    fn gather(&self, data: &[f64], width: usize, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), width, |r, c| data[idx[r] * width + c])
    }

    /// Rows `idx` of `s_t` as a batch matrix.
    pub fn states_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        self.gather(&self.states, self.state_dim, idx)
    }

    pub fn next_states_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        self.gather(&self.next_states, self.state_dim, idx)
    }

    pub fn actions_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        self.gather(&self.actions, self.action_dim, idx)
    }

    /// A copy keeping `n` uniformly chosen transitions (all if `n >= len`), in
    /// original order.
    pub fn subsample<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        let mut out = self.empty_like();
        for i in idx {
            out.push(&self.tuple(i)).expect("same dims");
        }
        out
    }

    pub fn empty_like(&self) -> Dataset {
        Dataset {
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            position_indices: self.position_indices.clone(),
            velocity_indices: self.velocity_indices.clone(),
            env_name: self.env_name.clone(),
            seed: self.seed,
            creator_version: self.creator_version.clone(),
            run_config: self.run_config.clone(),
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
        }
    }

    /// Distinct action vectors, sorted lexicographically.
    pub fn distinct_actions(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for i in 0..self.len() {
            let a = self.action(i);
            if !out.iter().any(|b| b.as_slice() == a) {
                out.push(a.to_vec());
            }
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        out
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            n_transitions: self.len(),
            position_indices: self.position_indices.clone(),
            velocity_indices: self.velocity_indices.clone(),
            env_name: self.env_name.clone(),
            seed: self.seed,
            creator_version: self.creator_version.clone(),
            run_config: self.run_config.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_container(
            w,
            DATASET_MAGIC,
            &self.header(),
            &[&self.states, &self.actions, &self.rewards, &self.next_states],
        )
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (h, _): (DatasetHeader, u64) = container::read_preamble(r, DATASET_MAGIC)?;
        let n = h.n_transitions;
        let states = container::read_f64s(r, n * h.state_dim, "states_t")?;
        let actions = container::read_f64s(r, n * h.action_dim, "actions")?;
        let rewards = container::read_f64s(r, n, "rewards")?;
        let next_states = container::read_f64s(r, n * h.state_dim, "states_t1")?;
        container::expect_eof(r)?;
        for (name, block) in [
            ("states_t", &states),
            ("actions", &actions),
            ("rewards", &rewards),
            ("states_t1", &next_states),
        ] {
            if let Some(i) = block.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{name} value {i}")));
            }
        }
        Ok(Self {
            state_dim: h.state_dim,
            action_dim: h.action_dim,
            position_indices: h.position_indices,
            velocity_indices: h.velocity_indices,
            env_name: h.env_name,
            seed: h.seed,
            creator_version: h.creator_version,
            run_config: h.run_config,
            states,
            actions,
            rewards,
            next_states,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize) -> Dataset {
        let mut d = Dataset::new(2, 1).with_provenance("test", 3, vec![0], vec![1]);
        for i in 0..n {
            let x = i as f64;
            d.push(&TransitionTuple {
                state: vec![x, -x],
                action: vec![if i % 2 == 0 { 1.0 } else { -1.0 }],
                reward: 1.0,
                next_state: vec![x + 0.5, 0.25 * x],
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn rejects_wrong_dims() {
        let mut d = Dataset::new(2, 1);
        let bad = TransitionTuple {
            state: vec![0.0],
            action: vec![0.0],
            reward: 0.0,
            next_state: vec![0.0, 0.0],
        };
        assert!(d.push(&bad).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut buf = Vec::new();
        sample(4).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(
            Dataset::read_from(&mut buf.as_slice()),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        sample(1).write_to(&mut buf).unwrap();
        buf[3] = b'2';
        assert!(matches!(
            Dataset::read_from(&mut buf.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let d = sample(0);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn distinct_actions_sorted() {
        assert_eq!(sample(5).distinct_actions(), vec![vec![-1.0], vec![1.0]]);
    }

    proptest! {
        #[test]
        fn load_save_is_byte_identical(
            rows in proptest::collection::vec((any::<i32>(), -1e6f64..1e6, -1e6f64..1e6), 0..20)
        ) {
            let mut d = Dataset::new(1, 1).with_provenance("prop", 1, vec![0], vec![]);
            for (a, s, r) in rows {
                d.push(&TransitionTuple {
                    state: vec![s],
                    action: vec![a as f64],
                    reward: r,
                    next_state: vec![s * 0.5],
                }).unwrap();
            }
            let mut first = Vec::new();
            d.write_to(&mut first).unwrap();
            let loaded = Dataset::read_from(&mut first.as_slice()).unwrap();
            let mut second = Vec::new();
            loaded.write_to(&mut second).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
