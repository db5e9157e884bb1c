use kfc_core::nnet::{gradient_check, relative_error, Activation, AdamState, Mlp};
use kfc_core::rng;
use kfc_core::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn random_net(seed: u64) -> (Mlp, DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng::seeded(seed);
    let depth = r.random_range(1..=3);
    let mut dims = vec![r.random_range(1..=6)];
    for _ in 0..depth {
        dims.push(r.random_range(1..=8));
    }
    let hidden = if seed.is_multiple_of(2) { Activation::Tanh } else { Activation::Relu };
    let mut net = Mlp::new(&dims, hidden, Activation::Identity, &mut r);
    // nonzero biases keep ReLU pre-activations off the kink
    let params: Vec<f64> = (0..net.num_params()).map(|_| r.random_range(-1.0..1.0)).collect();
    net.set_params_flat(&params).unwrap();
    let batch = r.random_range(1..=5);
    let x = DMatrix::from_fn(batch, dims[0], |_, _| r.random_range(-2.0..2.0));
    let w = DMatrix::from_fn(batch, *dims.last().unwrap(), |_, _| r.random_range(-1.0..1.0));
    (net, x, w)
}

#[test]
fn finite_differences_agree_on_random_nets() {
    for seed in 0..50 {
        let (net, x, w) = random_net(seed);
        let all: Vec<usize> = (0..net.num_params()).collect();
        for (k, (a, n)) in gradient_check(&net, &x, &w, &all, 1e-6).unwrap().iter().enumerate() {
            let rel = relative_error(*a, *n, 1e-7);
            assert!(rel <= 1e-4, "net {seed} param {k}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn adam_minimizes_quadratic() {
    let mut p = vec![3.0, -2.0];
    let mut adam = AdamState::new(&[2], 0.05);
    for _ in 0..2000 {
        let g = [2.0 * (p[0] - 1.0), 4.0 * (p[1] + 0.5)];
        adam.step(vec![p.as_mut_slice()], &[&g]).unwrap();
    }
    assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_row_independent(seed in 0u64..1000) {
        let (net, x, _) = random_net(seed);
        let full = net.forward(&x).unwrap();
        for i in 0..x.nrows() {
            let row = net.forward(&x.rows(i, 1).into_owned()).unwrap();
            prop_assert!((row - full.rows(i, 1)).norm() < 1e-14);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences(seed in 0u64..1000) {
        let (net, x, w) = random_net(seed * 2);
        let cache = net.forward_cached(&x).unwrap();
        let (_, dx) = net.backward(&cache, &w).unwrap();
        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let fd = (net.forward(&xp).unwrap().component_mul(&w).sum()
                    - net.forward(&xm).unwrap().component_mul(&w).sum()) / (2.0 * h);
                prop_assert!(relative_error(dx[(i, j)], fd, 1e-7) < 1e-4);
            }
        }
    }
}
