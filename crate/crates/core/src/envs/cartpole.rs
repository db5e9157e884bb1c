use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Env;
use crate::dataset::{Dataset, TransitionTuple};
use crate::rng;

pub const CARTPOLE_NAME: &str = "cartpole";

/// Gym cart-pole constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartpoleParams {
    pub masscart: f64,
    pub masspole: f64,
    /// Half the pole length.
    pub length: f64,
    pub force_mag: f64,
    pub tau: f64,
    pub gravity: f64,
    pub theta_threshold: f64,
    pub x_threshold: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            masscart: 1.0,
            masspole: 0.1,
            length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
            gravity: 9.8,
            theta_threshold: 12.0 * 2.0 * std::f64::consts::PI / 360.0,
            x_threshold: 2.4,
        }
    }
}

/// Cart-pole with state `(x, ẋ, θ, θ̇)` and a physical action in `{−1, +1}`
/// (any real value scales the force).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CartpoleEnv {
    pub params: CartpoleParams,
}

impl CartpoleEnv {
    pub fn new(params: CartpoleParams) -> Self {
        Self { params }
    }
}

/// Policy output `{0, 1}` to physical action `{−1, +1}`.
pub fn physical_action(a: usize) -> f64 {
    if a == 0 {
        -1.0
    } else {
        1.0
    }
}

impl Env for CartpoleEnv {
    fn name(&self) -> &str {
        CARTPOLE_NAME
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn position_indices(&self) -> Vec<usize> {
        vec![0, 2]
    }

    fn velocity_indices(&self) -> Vec<usize> {
        vec![1, 3]
    }

    fn step(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
        let force = p.force_mag * a[0];
        let total_mass = p.masscart + p.masspole;
        let polemass_length = p.masspole * p.length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + polemass_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (p.gravity * sin - cos * temp)
            / (p.length * (4.0 / 3.0 - p.masspole * cos * cos / total_mass));
        let x_acc = temp - polemass_length * theta_acc * cos / total_mass;
        vec![
            x + p.tau * x_dot,
            x_dot + p.tau * x_acc,
            theta + p.tau * theta_dot,
            theta_dot + p.tau * theta_acc,
        ]
    }

    fn is_terminal(&self, s: &[f64]) -> bool {
        s[0].abs() >= self.params.x_threshold || s[2].abs() >= self.params.theta_threshold
    }

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..4).map(|_| rng.random_range(-0.05..0.05)).collect()
    }
}

/// Linear-threshold expert `Θ(w·s + z)` with `z` drawn once per episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertPolicyConfig {
    pub weights: [f64; 4],
    pub z_low: f64,
    pub z_high: f64,
}

impl Default for ExpertPolicyConfig {
    fn default() -> Self {
        Self {
            weights: [0.015, 0.066, 1.8, 0.32],
            z_low: -0.2,
            z_high: 0.2,
        }
    }
}

impl ExpertPolicyConfig {
    pub fn draw_z<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.z_high > self.z_low {
            rng.random_range(self.z_low..self.z_high)
        } else {
            self.z_low
        }
    }
}

/// `Θ(w·s + z)` with `Θ(0) = 1`.
pub fn expert_action(cfg: &ExpertPolicyConfig, s: &[f64], z: f64) -> usize {
    let v: f64 = cfg.weights.iter().zip(s).map(|(w, x)| w * x).sum::<f64>() + z;
    usize::from(v >= 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectStats {
    pub episodes: usize,
    pub transitions: usize,
    /// Mean over episodes of the fraction of steps before the first terminal
    /// state.
    pub mean_survival: f64,
    /// Same fraction counting only the pole-angle bound.
    pub mean_upright: f64,
}

/// Expert rollouts of `steps` transitions each, without truncation at
/// termination. Rewards are 1 until the episode first terminates (the
/// terminating step included) and 0 afterwards.
pub fn collect(
    env: &CartpoleEnv,
    expert: &ExpertPolicyConfig,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> (Dataset, CollectStats) {
    let rollouts: Vec<(Vec<TransitionTuple>, usize, usize)> = (0..episodes)
        .into_par_iter()
        .map(|ep| {
            let mut rng = rng::stream(seed, ep as u64);
            let z = expert.draw_z(&mut rng);
            let mut s = env.reset(&mut rng);
            let mut alive = true;
            let mut survived = 0;
            let mut upright = true;
            let mut upright_steps = 0;
            let mut out = Vec::with_capacity(steps);
            for _ in 0..steps {
                let a = [physical_action(expert_action(expert, &s, z))];
                let next = env.step(&s, &a);
                out.push(TransitionTuple {
                    state: s,
                    action: a.to_vec(),
                    reward: if alive { 1.0 } else { 0.0 },
                    next_state: next.clone(),
                });
                if alive {
                    survived += 1;
                    alive = !env.is_terminal(&next);
                }
                if upright {
                    upright_steps += 1;
                    upright = next[2].abs() < env.params.theta_threshold;
                }
                s = next;
            }
            (out, survived, upright_steps)
        })
        .collect();

    let mut ds = Dataset::new(4, 1).with_provenance(
        CARTPOLE_NAME,
        seed,
        env.position_indices(),
        env.velocity_indices(),
    );
    let (mut survival, mut upright) = (0.0, 0.0);
    for (tuples, survived, up) in &rollouts {
        for t in tuples {
            ds.push(t).expect("cartpole dims");
        }
        if steps > 0 {
            survival += *survived as f64 / steps as f64;
            upright += *up as f64 / steps as f64;
        }
    }
    let per_episode = |total: f64| if episodes > 0 { total / episodes as f64 } else { 0.0 };
    let stats = CollectStats {
        episodes,
        transitions: ds.len(),
        mean_survival: per_episode(survival),
        mean_upright: per_episode(upright),
    };
    (ds, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_from_rest() {
        let env = CartpoleEnv::default();
        let s1 = env.step(&[0.0; 4], &[1.0]);
        let total = 1.1;
        let temp = 10.0 / total;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / total));
        let x_acc = temp - 0.05 * theta_acc / total;
        assert_eq!(s1[0], 0.0);
        assert!((s1[1] - 0.02 * x_acc).abs() < 1e-15);
        assert!((s1[1] - 0.195122).abs() < 1e-6);
        assert_eq!(s1[2], 0.0);
        assert!((s1[3] - 0.02 * theta_acc).abs() < 1e-15);
        assert!((s1[3] + 0.292683).abs() < 1e-6);
    }

    #[test]
    fn push_and_pull_does_not_return_to_rest() {
        let env = CartpoleEnv::default();
        let s2 = env.step(&env.step(&[0.0; 4], &[1.0]), &[-1.0]);
        // velocities cancel, positions keep the first step's drift
        let bits: Vec<u64> = s2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, [4571144834269585401, 0, 13796770867815913466, 0]);
        assert!((s2[0] - 0.02 * 0.195122).abs() < 1e-6);
    }

    #[test]
    fn massless_pole_without_gravity_is_double_integrator() {
        let env = CartpoleEnv::new(CartpoleParams {
            masspole: 0.0,
            gravity: 0.0,
            ..Default::default()
        });
        let s = [0.3, 1.5, 0.0, 0.0];
        let s1 = env.step(&s, &[1.0]);
        assert_eq!(s1[0], 0.3 + 1.5 * 0.02);
        assert!((s1[1] - (1.5 + 10.0 * 0.02)).abs() < 1e-15);
    }

    #[test]
    fn expert_examples() {
        let cfg = ExpertPolicyConfig::default();
        assert_eq!(expert_action(&cfg, &[0.0; 4], 0.1), 1);
        assert_eq!(expert_action(&cfg, &[0.0, 0.0, -0.2, 0.0], 0.0), 0);
        assert_eq!(expert_action(&cfg, &[1.0, 0.0, 0.0, 0.0], -0.1), 0);
        assert_eq!(expert_action(&cfg, &[0.0; 4], 0.0), 1);
    }

    #[test]
    fn collect_counts_and_determinism() {
        let env = CartpoleEnv::default();
        let cfg = ExpertPolicyConfig::default();
        let (empty, _) = collect(&env, &cfg, 0, 1000, 1);
        assert!(empty.is_empty());
        let (a, stats) = collect(&env, &cfg, 3, 50, 9);
        let (b, _) = collect(&env, &cfg, 3, 50, 9);
        assert_eq!(stats.transitions, 150);
        assert_eq!(a, b);
        for t in a.iter() {
            assert!(t.action[0] == 1.0 || t.action[0] == -1.0);
        }
    }
}
