use kfc_core::envs::{collect, CartpoleEnv, ExpertPolicyConfig, SyntheticBilinearEnv};
use kfc_core::koopman::{fit_linear, train};
use kfc_core::{Dataset, DMatrix, KoopmanForwardModel, KoopmanTrainConfig};
use proptest::prelude::*;

fn small_mlp() -> KoopmanTrainConfig {
    KoopmanTrainConfig {
        latent_dim: 8,
        hidden_dims: vec![32],
        epochs: 40,
        ..KoopmanTrainConfig::default()
    }
}

fn expert(episodes: usize, steps: usize) -> Dataset {
    collect(&CartpoleEnv::default(), &ExpertPolicyConfig::default(), episodes, steps, 0).0
}

#[test]
fn fit_linear_recovers_exact_bilinear_systems() {
    for seed in 0..10u64 {
        let (n, m) = (3 + seed as usize % 5, 1 + seed as usize % 2);
        let env = SyntheticBilinearEnv::random(n, m, seed).unwrap();
        let model = fit_linear(&env.collect(5, 100)).unwrap();
        assert!((&model.k0 - &env.k0).norm() <= 1e-8, "seed {seed}");
        for (got, want) in model.k_forcing.iter().zip(&env.k_forcing) {
            assert!((got - want).norm() <= 1e-8, "seed {seed}");
        }
    }
}

#[test]
fn trained_cartpole_model_fits_and_reconstructs() {
    let ds = expert(50, 200);
    let (model, report) = train(&ds, &small_mlp()).unwrap();
    assert_eq!(report.n_train + report.n_val, ds.len());
    assert!(report.val_losses.last().unwrap() < &report.val_losses[0]);
    assert!(report.val_prediction_rmse < 0.06, "{}", report.val_prediction_rmse);
    assert!(report.val_reconstruction_rmse < 0.06, "{}", report.val_reconstruction_rmse);
    let worst = (0..ds.len())
        .step_by(97)
        .map(|i| {
            let r = model.reconstruct(ds.state(i)).unwrap();
            r.iter().zip(ds.state(i)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    assert!(worst < 0.25, "{worst}");
}

#[test]
fn training_is_deterministic_and_files_roundtrip() {
    let ds = expert(5, 100);
    let cfg = KoopmanTrainConfig { epochs: 3, ..small_mlp() };
    let (a, ra) = train(&ds, &cfg).unwrap();
    let (b, rb) = train(&ds, &cfg).unwrap();
    assert_eq!(ra, rb);
    let bytes = |m: &KoopmanForwardModel| {
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        buf
    };
    assert_eq!(bytes(&a), bytes(&b));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.kfm");
    a.save(&path).unwrap();
    let back = KoopmanForwardModel::load(&path).unwrap();
    assert_eq!(bytes(&back), bytes(&a));
    let (s, act) = (ds.state(3), ds.action(3));
    assert_eq!(back.predict_next(s, act).unwrap(), a.predict_next(s, act).unwrap());
}

#[test]
fn different_seeds_give_different_models() {
    let ds = expert(5, 100);
    let cfg = KoopmanTrainConfig { epochs: 2, ..small_mlp() };
    let (a, _) = train(&ds, &cfg).unwrap();
    let (b, _) = train(&ds, &KoopmanTrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.k0, b.k0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_model_maps_zero_to_zero_and_is_linear(
        seed in 0u64..200,
        a in -2.0f64..2.0,
        scale in -3.0f64..3.0,
    ) {
        let env = SyntheticBilinearEnv::random(4, 1, seed).unwrap();
        let model = KoopmanForwardModel::identity(env.k0.clone(), env.k_forcing.clone()).unwrap();
        prop_assert_eq!(model.predict_next(&[0.0; 4], &[a]).unwrap(), vec![0.0; 4]);
        let s = [0.3, -0.1, 0.7, 0.2];
        let scaled: Vec<f64> = s.iter().map(|x| x * scale).collect();
        let p = model.predict_next(&s, &[a]).unwrap();
        let q = model.predict_next(&scaled, &[a]).unwrap();
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x * scale - y).abs() <= 1e-12);
        }
        let k = env.k0.clone() + &env.k_forcing[0] * a;
        let want = &k * DMatrix::from_column_slice(4, 1, &s);
        for (x, y) in p.iter().zip(want.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
