mod common;

use proptest::prelude::*;
use slowfast::model::{assemble, Domain, SlowFastSystem};
use slowfast::numcore::Mat;
use slowfast::reduction::{
    averaged_driver, invariant_covariance, reduce, reduced_controllable, reduced_forward, ReducedSystem,
};
use slowfast::sde::{simulate, TimeGrid};

#[test]
fn langevin_reduction_in_closed_form() {
    for n in 1..=3 {
        let sys = SlowFastSystem::langevin(n, 0.5, 1.0);
        let cost = common::identity_cost(n, 1.0, 1e6);
        let red = reduce(&sys, &cost).unwrap();
        let eye = Mat::identity(n, n);
        assert_eq!(red.sigma, eye);
        assert_eq!(red.abar, &eye * -2.0);
        assert_eq!(red.cbar, &eye * 2.0);
        assert!((red.dbar() - &eye * 2.0).amax() < 1e-14);
        assert!(red.mbar().iter().all(|&v| v == 0.0));
        assert!(reduced_controllable(&red));
    }
}

#[test]
fn doubling_fast_noise_quadruples_sigma() {
    let sys = common::random_bilinear(11, 2, 3, 3);
    let mut doubled = sys.clone();
    doubled.c2 *= 2.0;
    let s1 = invariant_covariance(&sys).unwrap();
    let s2 = invariant_covariance(&doubled).unwrap();
    assert!((s2 - s1.clone() * 4.0).amax() <= 1e-12 * s1.amax());
}

#[test]
fn toml_round_trip_is_exact() {
    let sys = common::random_bilinear(8, 2, 2, 3);
    let cost = common::random_cost(8, 2);
    let red = reduce(&sys, &cost).unwrap();
    let text = red.to_toml().unwrap();
    let back = ReducedSystem::from_toml(&text).unwrap();
    assert_eq!(back, red);
}

#[test]
fn slow_marginal_variance_approaches_reduced_value() {
    // Reduced Langevin from rest: Var X̄(T) = C̄²(1 − e^{2ĀT})/(−2Ā) = 1 − e^{−2} at T = ½.
    let sys = SlowFastSystem::langevin(1, 0.5, 1.0);
    let want = 1.0 - (-2.0f64).exp();
    let paths = 20_000;
    let gap = |eps: f64| {
        let asys = assemble(&sys, eps).unwrap();
        let grid = TimeGrid::new(eps / 100.0, 0.5).unwrap();
        let ens = simulate(&asys, &Domain::cube(2, 1e6), &[0.0, 0.0], &grid, paths, 4).unwrap();
        let n = grid.n_steps();
        let xs: Vec<f64> = (0..paths).map(|p| ens.state(p, n)[0]).collect();
        let mean = xs.iter().sum::<f64>() / paths as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
        (var - want).abs()
    };
    let coarse = gap(0.1);
    let fine = gap(0.01);
    let se = want * (2.0 / paths as f64).sqrt();
    assert!(fine < coarse, "{fine} vs {coarse}");
    assert!(fine <= 4.0 * se + 0.02, "{fine}");
}

fn block_diagonal() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..3, 1usize..4, 1usize..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decoupled_fast_block_leaves_slow_drift((seed, ns, nf, m) in block_diagonal()) {
        let mut sys = common::random_bilinear(seed, ns, nf, m);
        sys.a12 = Mat::zeros(ns, nf);
        let (abar, cbar) = reduced_forward(&sys).unwrap();
        prop_assert_eq!(abar, sys.a11.clone());
        prop_assert_eq!(cbar, sys.c1.clone());
    }

    #[test]
    fn sigma_solves_lyapunov((seed, ns, nf, m) in block_diagonal()) {
        let sys = common::random_bilinear(seed, ns, nf, m + nf);
        let s = invariant_covariance(&sys).unwrap();
        let q = &sys.c2 * sys.c2.transpose();
        let residual = &sys.a22 * &s + &s * sys.a22.transpose() + &q;
        prop_assert!(residual.amax() <= 1e-10 * q.amax().max(1.0));
        prop_assert_eq!(&s, &s.transpose());
    }

    #[test]
    fn averaged_driver_is_representable((seed, ns, nf, m) in block_diagonal()) {
        let sys = common::random_bilinear(seed, ns, nf, m + nf);
        let cost = common::random_cost(seed, ns);
        let sigma = invariant_covariance(&sys).unwrap();
        let avg = averaged_driver(&sys, &cost, &sigma).unwrap();
        prop_assert_eq!(avg.nbar.shape(), (m + nf, ns));
        prop_assert!(avg.bbar.ncols() >= sys.controls());
    }
}
