use kfc_core::envs::{
    collect, fidelity_eval, AnyEnv, CartpoleEnv, Env, ExpertPolicyConfig, SyntheticBilinearEnv,
    MATCH_TOLERANCE,
};
use kfc_core::koopman::fit_linear;
use kfc_core::symmetry::{AugmentConfig, AugmentMode};
use kfc_core::{rng, Error, KoopmanForwardModel};
use proptest::prelude::*;

fn synthetic_model(env: &SyntheticBilinearEnv) -> KoopmanForwardModel {
    KoopmanForwardModel::identity(env.k0.clone(), env.k_forcing.clone()).unwrap()
}

#[test]
fn expert_keeps_the_pole_upright() {
    let (ds, stats) = collect(&CartpoleEnv::default(), &ExpertPolicyConfig::default(), 100, 1000, 0);
    assert_eq!(ds.len(), 100_000);
    assert!(stats.mean_upright >= 0.9, "{stats:?}");
    assert!(stats.mean_survival <= stats.mean_upright);
}

#[test]
fn rewards_stop_after_first_termination() {
    let (ds, _) = collect(&CartpoleEnv::default(), &ExpertPolicyConfig::default(), 4, 1000, 3);
    for ep in 0..4 {
        let r: Vec<f64> = (0..1000).map(|i| ds.reward(ep * 1000 + i)).collect();
        let first_zero = r.iter().position(|x| *x == 0.0).unwrap_or(1000);
        assert!(r[first_zero..].iter().all(|x| *x == 0.0));
        assert!(r[..first_zero].iter().all(|x| *x == 1.0));
    }
}

#[test]
fn dataset_provenance_rebuilds_env() {
    let (ds, _) = collect(&CartpoleEnv::default(), &ExpertPolicyConfig::default(), 1, 10, 0);
    assert!(matches!(AnyEnv::for_dataset(&ds).unwrap(), AnyEnv::Cartpole(_)));
    let syn = SyntheticBilinearEnv::random(3, 2, 8).unwrap();
    let sds = syn.collect(1, 10);
    match AnyEnv::for_dataset(&sds).unwrap() {
        AnyEnv::Synthetic(e) => assert_eq!(e, syn),
        other => panic!("{other:?}"),
    }
    assert!(matches!(AnyEnv::by_name("pendulum", 2, 1, 0), Err(Error::Config(_))));
}

#[test]
fn no_augmentation_has_zero_shift_and_error_on_synthetic() {
    let env = SyntheticBilinearEnv::random(4, 1, 1).unwrap();
    let ds = env.collect(5, 100);
    let model = synthetic_model(&env);
    let r = fidelity_eval(&env, Some(&model), &ds, &AugmentConfig::default(), 200, 0, None).unwrap();
    assert_eq!(r.rows.len(), 200);
    assert!(r.rows.iter().all(|row| row.delta_s == 0.0 && row.delta_e() <= 1e-12));
    assert_eq!(r.matched.std, 0.0);
}

#[test]
fn exact_symmetries_of_exact_models_are_dynamics_consistent() {
    let env = SyntheticBilinearEnv::random(5, 2, 4).unwrap();
    let ds = env.collect(10, 100);
    let model = synthetic_model(&env);
    for mode in [AugmentMode::Kfc, AugmentMode::Kfcpp] {
        let cfg = AugmentConfig {
            eps_std_kfc: 1e-3,
            eps_std_kfcpp: 1e-3,
            ..AugmentConfig::with_mode(mode)
        };
        let r = fidelity_eval(&env, Some(&model), &ds, &cfg, 500, 2, None).unwrap();
        assert!(r.summary.mean_delta_s > 0.0);
        assert!(r.rows.iter().all(|row| row.delta_e() <= 1e-8), "{mode}");
        assert!(r.matched.summary.mean_delta_e > 1e3 * r.summary.mean_delta_e.max(1e-16));
    }
}

#[test]
fn matched_gaussian_is_calibrated() {
    let env = CartpoleEnv::default();
    let (ds, _) = collect(&env, &ExpertPolicyConfig::default(), 10, 500, 1);
    let model = fit_linear(&ds).unwrap();
    let cfg = AugmentConfig::with_mode(AugmentMode::Kfcpp);
    let r = fidelity_eval(&env, Some(&model), &ds, &cfg, 1000, 0, None).unwrap();
    assert!(r.matched.relative_gap <= MATCH_TOLERANCE, "{}", r.matched.relative_gap);
    let rel = (r.matched.summary.mean_delta_s / r.summary.mean_delta_s - 1.0).abs();
    assert!(rel <= MATCH_TOLERANCE);
    assert_eq!(r.summary.fallbacks, 0);
}

#[test]
fn fidelity_is_seed_deterministic_and_clamps_samples() {
    let env = SyntheticBilinearEnv::random(3, 1, 2).unwrap();
    let ds = env.collect(1, 50);
    let model = synthetic_model(&env);
    let cfg = AugmentConfig::with_mode(AugmentMode::Kfcpp);
    let a = fidelity_eval(&env, Some(&model), &ds, &cfg, 500, 9, None).unwrap();
    let b = fidelity_eval(&env, Some(&model), &ds, &cfg, 500, 9, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 50);
}

#[test]
fn fidelity_rejects_mismatched_env() {
    let env = SyntheticBilinearEnv::random(4, 1, 2).unwrap();
    let (ds, _) = collect(&CartpoleEnv::default(), &ExpertPolicyConfig::default(), 1, 20, 0);
    let cfg = AugmentConfig::default();
    assert!(matches!(
        fidelity_eval(&env, None, &ds, &cfg, 10, 0, None),
        Err(Error::Config(_))
    ));
    let wrong = SyntheticBilinearEnv::random(3, 1, 2).unwrap();
    assert!(matches!(
        fidelity_eval(&wrong, None, &ds, &cfg, 10, 0, None),
        Err(Error::DimensionMismatch(_))
    ));
}

#[test]
fn fidelity_csv_lists_both_modes() {
    let env = SyntheticBilinearEnv::random(3, 1, 5).unwrap();
    let ds = env.collect(1, 40);
    let model = synthetic_model(&env);
    let r = fidelity_eval(&env, Some(&model), &ds, &AugmentConfig::with_mode(AugmentMode::Kfc), 30, 0, None).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tuple_index,delta_s,delta_e_pos,delta_e_vel,mode");
    assert_eq!(lines.len(), 61);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",kfc")).count(), 30);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",matched_gaussian")).count(), 30);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cartpole_dynamics_are_translation_invariant(
        x in -2.0f64..2.0,
        v in -2.0f64..2.0,
        th in -0.2f64..0.2,
        w in -2.0f64..2.0,
        c in -5.0f64..5.0,
        push in proptest::bool::ANY,
    ) {
        let env = CartpoleEnv::default();
        let a = [if push { 1.0 } else { -1.0 }];
        let base = env.step(&[x, v, th, w], &a);
        let moved = env.step(&[x + c, v, th, w], &a);
        prop_assert!((moved[0] - base[0] - c).abs() <= 1e-12);
        prop_assert_eq!(&moved[1..], &base[1..]);
    }

    #[test]
    fn synthetic_step_is_linear_in_state(seed in 0u64..500, scale in -3.0f64..3.0) {
        let env = SyntheticBilinearEnv::random(4, 1, seed).unwrap();
        let mut r = rng::seeded(seed);
        let s = env.reset(&mut r);
        let a = [0.3];
        let scaled: Vec<f64> = s.iter().map(|x| x * scale).collect();
        let lhs = env.step(&scaled, &a);
        let rhs: Vec<f64> = env.step(&s, &a).iter().map(|x| x * scale).collect();
        for (p, q) in lhs.iter().zip(&rhs) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }
}
