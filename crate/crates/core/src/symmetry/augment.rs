use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::generator::{GeneratorCache, SymmetryGenerator};
use super::sidecar::{Sidecar, SidecarRecord};
use crate::dataset::TransitionTuple;
use crate::error::{Error, Result};
use crate::koopman::KoopmanForwardModel;
use crate::linalg::EigOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Kfc,
    Kfcpp,
    Gaussian,
    VaeNoise,
    KfcppPrediction,
    FwdPrediction,
    None,
}

impl AugmentMode {
    pub const ALL: [AugmentMode; 7] = [
        AugmentMode::None,
        AugmentMode::Gaussian,
        AugmentMode::VaeNoise,
        AugmentMode::Kfc,
        AugmentMode::Kfcpp,
        AugmentMode::KfcppPrediction,
        AugmentMode::FwdPrediction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMode::Kfc => "kfc",
            AugmentMode::Kfcpp => "kfcpp",
            AugmentMode::Gaussian => "gaussian",
            AugmentMode::VaeNoise => "vae_noise",
            AugmentMode::KfcppPrediction => "kfcpp_prediction",
            AugmentMode::FwdPrediction => "fwd_prediction",
            AugmentMode::None => "none",
        }
    }

    /// Modes that need a forward model.
    pub fn needs_model(self) -> bool {
        !matches!(self, AugmentMode::Gaussian | AugmentMode::None)
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    /// Probability of the configured Koopman mode; otherwise Gaussian noise.
    pub p_koopman: f64,
    pub eps_std_kfc: f64,
    pub eps_std_kfcpp: f64,
    pub gaussian_std: f64,
    pub vae_noise_std: f64,
    pub fwd_pred_state_std: f64,
    /// Draw one `ε` per conjugate eigenvalue pair instead of one per eigenvalue.
    pub tie_conjugate_pairs: bool,
    pub condition_threshold: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mode: AugmentMode::None,
            p_koopman: 0.8,
            eps_std_kfc: 5e-5,
            eps_std_kfcpp: 1e-4,
            gaussian_std: 3e-3,
            vae_noise_std: 3e-3,
            fwd_pred_state_std: 6e-3,
            tie_conjugate_pairs: false,
            condition_threshold: crate::linalg::DEFAULT_CONDITION_THRESHOLD,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn with_mode(mode: AugmentMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_koopman) {
            return Err(Error::Config(format!("p_koopman {} outside [0,1]", self.p_koopman)));
        }
        let stds = [
            self.eps_std_kfc,
            self.eps_std_kfcpp,
            self.gaussian_std,
            self.vae_noise_std,
            self.fwd_pred_state_std,
        ];
        if stds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("standard deviations must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Augmented pair of states. Action and reward are never part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub s_tilde_t: Vec<f64>,
    pub s_tilde_t1: Vec<f64>,
    /// Mechanism that actually produced the pair.
    pub source_mode: AugmentMode,
    /// `‖s̃_t − s_t‖ + ‖s̃_{t+1} − s_{t+1}‖`.
    pub delta_s: f64,
    /// The configured symmetry mode was unavailable for this tuple.
    pub fell_back: bool,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn add_noise<R: Rng + ?Sized>(s: &[f64], std: f64, rng: &mut R) -> Vec<f64> {
    if std == 0.0 {
        return s.to_vec();
    }
    s.iter()
        .map(|x| x + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `D((I + Σ)·E(s))`.
pub fn apply_shift(model: &KoopmanForwardModel, shift: &DMatrix<f64>, s: &[f64]) -> Result<Vec<f64>> {
    if shift.shape() != (model.latent_dim, model.latent_dim) {
        return Err(Error::DimensionMismatch(format!(
            "shift is {:?}, latent dimension is {}",
            shift.shape(),
            model.latent_dim
        )));
    }
    let z = model.encode(s)?;
    let shifted = &z + shift * &z;
    model.decode(&shifted)
}

/// Counters accumulated by an [`Augmenter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub tuples: u64,
    pub koopman: u64,
    pub gaussian: u64,
    pub fallbacks: u64,
}

/// Stateful augmentation engine: caches generators per action and counts
/// fallbacks.
#[derive(Debug, Clone)]
pub struct Augmenter<'a> {
    model: Option<&'a KoopmanForwardModel>,
    cfg: AugmentConfig,
    cache: GeneratorCache,
    sidecar: Option<&'a Sidecar>,
    pub stats: AugmentStats,
}

impl<'a> Augmenter<'a> {
    pub fn new(model: Option<&'a KoopmanForwardModel>, cfg: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode.needs_model() && model.is_none() {
            return Err(Error::Config(format!("mode {} requires a Koopman model", cfg.mode)));
        }
        let cache = GeneratorCache::new(EigOptions {
            condition_threshold: cfg.condition_threshold,
        });
        Ok(Self {
            model,
            cfg,
            cache,
            sidecar: None,
            stats: AugmentStats::default(),
        })
    }

    /// Use precomputed generators; the sidecar must have been built for the
    /// same dataset and mode.
    pub fn with_sidecar(mut self, sidecar: &'a Sidecar) -> Result<Self> {
        let want = sidecar.header.mode;
        let ok = match self.cfg.mode {
            AugmentMode::Kfc => want == AugmentMode::Kfc,
            AugmentMode::Kfcpp | AugmentMode::KfcppPrediction => want == AugmentMode::Kfcpp,
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "sidecar built for {want} cannot serve mode {}",
                self.cfg.mode
            )));
        }
        if let Some(m) = self.model {
            if sidecar.header.latent_dim != m.latent_dim {
                return Err(Error::DimensionMismatch("sidecar latent dimension".into()));
            }
        }
        self.sidecar = Some(sidecar);
        Ok(self)
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    fn model(&self) -> &'a KoopmanForwardModel {
        self.model.expect("checked at construction")
    }

    fn generator(
        &mut self,
        index: Option<usize>,
        a: &[f64],
        eigen: bool,
    ) -> Result<Option<std::sync::Arc<SymmetryGenerator>>> {
        if let (Some(sc), Some(i)) = (self.sidecar, index) {
            return Ok(match sc.records.get(i) {
                Some(SidecarRecord::Generator(g)) => Some(g.clone()),
                Some(SidecarRecord::Fallback) | None => None,
            });
        }
        let model = self.model();
        if eigen {
            self.cache.eigen(model, a)
        } else {
            self.cache.commutant(model, a)
        }
    }

    fn gaussian_pair<R: Rng + ?Sized>(&self, t: &TransitionTuple, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let std = self.cfg.gaussian_std;
        (add_noise(&t.state, std, rng), add_noise(&t.next_state, std, rng))
    }

    fn kfcpp_shift<R: Rng + ?Sized>(
        &self,
        g: &SymmetryGenerator,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        let n = g.dim();
        let std = self.cfg.eps_std_kfcpp;
        let eps: Vec<f64> = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        g.eigen_shift(&eps, self.cfg.tie_conjugate_pairs)
    }

    /// Augment one tuple. `index` selects the sidecar record when one is
    /// attached.
    pub fn augment<R: Rng + ?Sized>(
        &mut self,
        index: Option<usize>,
        t: &TransitionTuple,
        rng: &mut R,
    ) -> Result<AugmentedPair> {
        self.stats.tuples += 1;
        let mode = self.cfg.mode;
        let (s_t, s_t1, source, fell_back) = match mode {
            AugmentMode::None => (t.state.clone(), t.next_state.clone(), AugmentMode::None, false),
            AugmentMode::Gaussian => {
                let (a, b) = self.gaussian_pair(t, rng);
                self.stats.gaussian += 1;
                (a, b, AugmentMode::Gaussian, false)
            }
            _ => {
                let use_koopman = self.cfg.p_koopman >= 1.0
                    || (self.cfg.p_koopman > 0.0 && rng.random_bool(self.cfg.p_koopman));
                let produced = if use_koopman {
                    self.koopman_pair(index, t, rng)?
                } else {
                    None
                };
                match produced {
                    Some((a, b)) => {
                        self.stats.koopman += 1;
                        (a, b, mode, false)
                    }
                    None => {
                        if use_koopman {
                            self.stats.fallbacks += 1;
                        }
                        self.stats.gaussian += 1;
                        let (a, b) = self.gaussian_pair(t, rng);
                        (a, b, AugmentMode::Gaussian, use_koopman)
                    }
                }
            }
        };
        let delta_s = l2(&s_t, &t.state) + l2(&s_t1, &t.next_state);
        Ok(AugmentedPair {
            s_tilde_t: s_t,
            s_tilde_t1: s_t1,
            source_mode: source,
            delta_s,
            fell_back,
        })
    }

    /// `None` when the generator is unavailable and the caller must fall back.
    fn koopman_pair<R: Rng + ?Sized>(
        &mut self,
        index: Option<usize>,
        t: &TransitionTuple,
        rng: &mut R,
    ) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        let model = self.model();
        match self.cfg.mode {
            AugmentMode::Kfc => {
                let Some(g) = self.generator(index, &t.action, false)? else {
                    return Ok(None);
                };
                let SymmetryGenerator::Commutant { sigma, .. } = g.as_ref() else {
                    return Ok(None);
                };
                let eps = self.cfg.eps_std_kfc * rng.sample::<f64, _>(StandardNormal);
                let shift = sigma * eps;
                Ok(Some((
                    apply_shift(model, &shift, &t.state)?,
                    apply_shift(model, &shift, &t.next_state)?,
                )))
            }
            AugmentMode::Kfcpp => {
                let Some(g) = self.generator(index, &t.action, true)? else {
                    return Ok(None);
                };
                let shift = self.kfcpp_shift(&g, rng)?;
                Ok(Some((
                    apply_shift(model, &shift, &t.state)?,
                    apply_shift(model, &shift, &t.next_state)?,
                )))
            }
            AugmentMode::KfcppPrediction => {
                let Some(g) = self.generator(index, &t.action, true)? else {
                    return Ok(None);
                };
                let shift = self.kfcpp_shift(&g, rng)?;
                let s = apply_shift(model, &shift, &t.state)?;
                let s1 = model.predict_next(&s, &t.action)?;
                Ok(Some((s, s1)))
            }
            AugmentMode::FwdPrediction => {
                let s = add_noise(&t.state, self.cfg.fwd_pred_state_std, rng);
                let s1 = model.predict_next(&s, &t.action)?;
                Ok(Some((s, s1)))
            }
            AugmentMode::VaeNoise => {
                let std = self.cfg.vae_noise_std;
                let latent_noise = |s: &[f64], rng: &mut R| -> Result<Vec<f64>> {
                    let z = model.encode(s)?;
                    let noisy = DVector::from_iterator(
                        z.len(),
                        z.iter().map(|x| x + std * rng.sample::<f64, _>(StandardNormal)),
                    );
                    model.decode(&noisy)
                };
                let a = latent_noise(&t.state, rng)?;
                let b = latent_noise(&t.next_state, rng)?;
                Ok(Some((a, b)))
            }
            AugmentMode::Gaussian | AugmentMode::None => unreachable!("handled by caller"),
        }
    }
}

/// One-off augmentation without a persistent cache.
pub fn augment_tuple<R: Rng + ?Sized>(
    model: Option<&KoopmanForwardModel>,
    tuple: &TransitionTuple,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedPair> {
    Augmenter::new(model, cfg.clone())?.augment(None, tuple, rng)
}
