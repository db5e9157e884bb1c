//! Shift magnitude ΔS and dynamics error ΔE of augmented tuples, measured
//! against the simulator.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::Env;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::koopman::KoopmanForwardModel;
use crate::rng;
use crate::symmetry::{AugmentConfig, AugmentMode, Augmenter, Sidecar};

/// Relative ΔS tolerance of the Gaussian calibration.
pub const MATCH_TOLERANCE: f64 = 0.02;
const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub tuple_index: usize,
    pub delta_s: f64,
    pub delta_e_pos: f64,
    pub delta_e_vel: f64,
}

impl FidelityRow {
    pub fn delta_e(&self) -> f64 {
        self.delta_e_pos.hypot(self.delta_e_vel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let max = values.clone().fold(0.0, f64::max);
        let width = if max > 0.0 { max / HISTOGRAM_BINS as f64 } else { 1.0 };
        let edges = (0..=HISTOGRAM_BINS).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; HISTOGRAM_BINS];
        for v in values {
            let b = ((v / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub mode: AugmentMode,
    pub samples: usize,
    pub mean_delta_s: f64,
    pub mean_delta_e: f64,
    pub mean_delta_e_pos: f64,
    pub mean_delta_e_vel: f64,
    pub fallbacks: u64,
    pub delta_s_histogram: Histogram,
    pub delta_e_histogram: Histogram,
}

impl FidelitySummary {
    fn of(mode: AugmentMode, rows: &[FidelityRow], fallbacks: u64) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&FidelityRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            mode,
            samples: rows.len(),
            mean_delta_s: mean(&|r| r.delta_s),
            mean_delta_e: mean(&|r| r.delta_e()),
            mean_delta_e_pos: mean(&|r| r.delta_e_pos),
            mean_delta_e_vel: mean(&|r| r.delta_e_vel),
            fallbacks,
            delta_s_histogram: Histogram::of(rows.iter().map(|r| r.delta_s)),
            delta_e_histogram: Histogram::of(rows.iter().map(|r| r.delta_e())),
        }
    }
}

/// Gaussian baseline whose mean ΔS matches the evaluated mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedGaussian {
    pub std: f64,
    /// `|ΔS_gauss − ΔS_mode| / ΔS_mode`.
    pub relative_gap: f64,
    pub bisection_steps: usize,
    pub summary: FidelitySummary,
    pub rows: Vec<FidelityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub rows: Vec<FidelityRow>,
    pub summary: FidelitySummary,
    pub matched: MatchedGaussian,
    pub seed: u64,
}

impl FidelityReport {
    /// Columns `tuple_index,delta_s,delta_e_pos,delta_e_vel,mode`; the
    /// matched baseline rows carry mode `matched_gaussian`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "tuple_index,delta_s,delta_e_pos,delta_e_vel,mode")?;
        let tagged = self
            .rows
            .iter()
            .map(|r| (r, self.summary.mode.as_str()))
            .chain(self.matched.rows.iter().map(|r| (r, "matched_gaussian")));
        for (r, mode) in tagged {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{}",
                r.tuple_index, r.delta_s, r.delta_e_pos, r.delta_e_vel, mode
            )?;
        }
        Ok(())
    }
}

fn split_norms(diff: &[f64], pos: &[usize], vel: &[usize]) -> (f64, f64) {
    let norm = |idx: &[usize]| idx.iter().map(|&i| diff[i] * diff[i]).sum::<f64>().sqrt();
    (norm(pos), norm(vel))
}

struct Evaluation {
    rows: Vec<FidelityRow>,
    fallbacks: u64,
}

fn evaluate<E: Env>(
    env: &E,
    model: Option<&KoopmanForwardModel>,
    dataset: &Dataset,
    indices: &[usize],
    cfg: AugmentConfig,
    sidecar: Option<&Sidecar>,
    mut rng: rng::Rng,
) -> Result<Evaluation> {
    let mut aug = Augmenter::new(model, cfg)?;
    if let Some(sc) = sidecar {
        aug = aug.with_sidecar(sc)?;
    }
    let pos = env.position_indices();
    let vel = env.velocity_indices();
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let t = dataset.tuple(i);
        let pair = aug.augment(Some(i), &t, &mut rng)?;
        let sim = env.step(&pair.s_tilde_t, &t.action);
        let diff: Vec<f64> = pair.s_tilde_t1.iter().zip(&sim).map(|(a, b)| a - b).collect();
        let (delta_e_pos, delta_e_vel) = split_norms(&diff, &pos, &vel);
        rows.push(FidelityRow {
            tuple_index: i,
            delta_s: pair.delta_s,
            delta_e_pos,
            delta_e_vel,
        });
    }
    Ok(Evaluation {
        rows,
        fallbacks: aug.stats.fallbacks,
    })
}

fn mean_delta_s(rows: &[FidelityRow]) -> f64 {
    rows.iter().map(|r| r.delta_s).sum::<f64>() / rows.len().max(1) as f64
}

/// ΔS/ΔE for `samples` tuples drawn without replacement, with the configured
/// mode applied at probability 1, plus a ΔS-matched Gaussian baseline.
///
/// ΔE is `‖s̃_{t+1} − step(s̃_t, a_t)‖` split over the env's position and
/// velocity indices. `samples` beyond the dataset size is clamped.
pub fn fidelity_eval<E: Env>(
    env: &E,
    model: Option<&KoopmanForwardModel>,
    dataset: &Dataset,
    cfg: &AugmentConfig,
    samples: usize,
    seed: u64,
    sidecar: Option<&Sidecar>,
) -> Result<FidelityReport> {
    if dataset.state_dim != env.state_dim() || dataset.action_dim != env.action_dim() {
        return Err(Error::DimensionMismatch(format!(
            "dataset ({}, {}) vs env {} ({}, {})",
            dataset.state_dim,
            dataset.action_dim,
            env.name(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    if !dataset.env_name.is_empty() && dataset.env_name != env.name() {
        return Err(Error::Config(format!(
            "dataset was collected on {:?}, evaluating on {:?}",
            dataset.env_name,
            env.name()
        )));
    }
    let samples = if samples > dataset.len() {
        log::warn!("{samples} samples requested, dataset has {}", dataset.len());
        dataset.len()
    } else {
        samples
    };
    let mut pick = rng::stream(seed, 0);
    let mut indices = index::sample(&mut pick, dataset.len(), samples).into_vec();
    indices.sort_unstable();

    let mut sym_cfg = cfg.clone();
    sym_cfg.p_koopman = 1.0;
    let sym = evaluate(env, model, dataset, &indices, sym_cfg, sidecar, rng::stream(seed, 1))?;
    let summary = FidelitySummary::of(cfg.mode, &sym.rows, sym.fallbacks);

    let target = summary.mean_delta_s;
    let gauss = |std: f64| -> Result<Vec<FidelityRow>> {
        let gcfg = AugmentConfig {
            mode: AugmentMode::Gaussian,
            gaussian_std: std,
            ..cfg.clone()
        };
        Ok(evaluate(env, None, dataset, &indices, gcfg, None, rng::stream(seed, 2))?.rows)
    };
    let (std, rows, steps) = if target > 0.0 {
        let mut hi = cfg.gaussian_std.max(1e-12);
        let mut lo = 0.0;
        let mut steps = 0;
        while mean_delta_s(&gauss(hi)?) < target {
            lo = hi;
            hi *= 2.0;
            steps += 1;
        }
        let mut best = (hi, gauss(hi)?);
        while steps < 200 {
            let gap = (mean_delta_s(&best.1) - target).abs() / target;
            if gap <= MATCH_TOLERANCE * 1e-3 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let rows = gauss(mid)?;
            let m = mean_delta_s(&rows);
            if m < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if (m - target).abs() < (mean_delta_s(&best.1) - target).abs() {
                best = (mid, rows);
            }
            steps += 1;
        }
        (best.0, best.1, steps)
    } else {
        (0.0, gauss(0.0)?, 0)
    };
    let g_summary = FidelitySummary::of(AugmentMode::Gaussian, &rows, 0);
    let relative_gap = if target > 0.0 {
        (g_summary.mean_delta_s - target).abs() / target
    } else {
        g_summary.mean_delta_s
    };
    Ok(FidelityReport {
        rows: sym.rows,
        summary,
        matched: MatchedGaussian {
            std,
            relative_gap,
            bisection_steps: steps,
            summary: g_summary,
            rows,
        },
        seed,
    })
}
