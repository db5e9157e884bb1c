use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, CqlConfig, CqlLearner, DiscreteActionSet};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::koopman::KoopmanForwardModel;
use crate::rng;
use crate::symmetry::{AugmentConfig, AugmentStats, Augmenter, Sidecar};

/// Means over one logging window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Steps completed at the end of the window.
    pub step: usize,
    pub bc: bool,
    pub q_loss: f64,
    pub bellman: f64,
    pub cql_gap: f64,
    pub alpha_tilde: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub mean_q: f64,
    pub min_q: f64,
    pub max_q: f64,
    pub augment: AugmentStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub augment: AugmentStats,
}

impl TrainLog {
    /// One JSON object per record.
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Window {
    n: usize,
    sums: [f64; 7],
    min_q: f64,
    max_q: f64,
}

/// [`train_agent`] with a hook that sees the dataset indices and the batch
/// consumed at every step.
pub fn train_agent_observed(
    dataset: &Dataset,
    model: Option<&KoopmanForwardModel>,
    aug_cfg: &AugmentConfig,
    cfg: &CqlConfig,
    sidecar: Option<&Sidecar>,
    observer: &mut dyn FnMut(&[usize], &Batch),
) -> Result<(CqlLearner, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    if let Some(m) = model {
        if m.state_dim != dataset.state_dim || m.action_dim != dataset.action_dim {
            return Err(Error::DimensionMismatch(format!(
                "model ({}, {}) vs dataset ({}, {})",
                m.state_dim, m.action_dim, dataset.state_dim, dataset.action_dim
            )));
        }
    }
    if let Some(sc) = sidecar {
        if sc.header.count != dataset.len() {
            return Err(Error::DimensionMismatch(format!(
                "sidecar has {} records, dataset {} tuples",
                sc.header.count,
                dataset.len()
            )));
        }
    }
    let actions = DiscreteActionSet::from_dataset(dataset)?;
    let action_idx: Vec<usize> = (0..dataset.len())
        .map(|i| actions.index_of(dataset.action(i)).expect("action set built from dataset"))
        .collect();
    let mut aug = Augmenter::new(model, aug_cfg.clone())?;
    if let Some(sc) = sidecar {
        aug = aug.with_sidecar(sc)?;
    }
    let mut learner = CqlLearner::new(dataset.state_dim, actions, cfg)?;
    let mut batch_rng = rng::stream(cfg.seed, 1);
    let mut aug_rng = rng::stream(cfg.seed, 2);

    let d = dataset.state_dim;
    let b = cfg.batch_size;
    let mut records = Vec::new();
    let mut win = Window::default();
    for step in 0..cfg.train_steps {
        let idx: Vec<usize> = (0..b).map(|_| batch_rng.random_range(0..dataset.len())).collect();
        let mut states = DMatrix::zeros(b, d);
        let mut next_states = DMatrix::zeros(b, d);
        for (row, &i) in idx.iter().enumerate() {
            let pair = aug.augment(Some(i), &dataset.tuple(i), &mut aug_rng)?;
            states.row_mut(row).copy_from_slice(&pair.s_tilde_t);
            next_states.row_mut(row).copy_from_slice(&pair.s_tilde_t1);
        }
        let batch = Batch {
            states,
            actions: idx.iter().map(|&i| action_idx[i]).collect(),
            rewards: idx.iter().map(|&i| dataset.reward(i)).collect(),
            next_states,
        };
        observer(&idx, &batch);
        let bc = step < cfg.bc_warmup_steps;
        let (q, p) = learner.update(&batch, cfg)?;

        if win.n == 0 {
            win.min_q = f64::INFINITY;
            win.max_q = f64::NEG_INFINITY;
        }
        win.n += 1;
        for (s, v) in win.sums.iter_mut().zip([
            q.total,
            q.bellman,
            q.gap,
            learner.alpha_tilde,
            p.loss,
            p.entropy,
            q.mean_q,
        ]) {
            *s += v;
        }
        win.min_q = win.min_q.min(q.min_q);
        win.max_q = win.max_q.max(q.max_q);

        let done = step + 1;
        let warmup_edge = done == cfg.bc_warmup_steps;
        if done % cfg.log_every == 0 || done == cfg.train_steps || warmup_edge {
            let n = win.n as f64;
            let m = |k: usize| win.sums[k] / n;
            records.push(TrainRecord {
                step: done,
                bc,
                q_loss: m(0),
                bellman: m(1),
                cql_gap: m(2),
                alpha_tilde: m(3),
                policy_loss: m(4),
                entropy: m(5),
                mean_q: m(6),
                min_q: win.min_q,
                max_q: win.max_q,
                augment: aug.stats,
            });
            win = Window::default();
        }
    }
    Ok((
        learner,
        TrainLog {
            records,
            augment: aug.stats,
        },
    ))
}

/// BC warmup then CQL on batches sampled uniformly with replacement and
/// augmented afresh at every step. Actions and rewards always come straight
/// from the dataset.
pub fn train_agent(
    dataset: &Dataset,
    model: Option<&KoopmanForwardModel>,
    aug_cfg: &AugmentConfig,
    cfg: &CqlConfig,
    sidecar: Option<&Sidecar>,
) -> Result<(CqlLearner, TrainLog)> {
    train_agent_observed(dataset, model, aug_cfg, cfg, sidecar, &mut |_, _| {})
}
