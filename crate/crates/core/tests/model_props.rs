mod common;

use proptest::prelude::*;
use slowfast::model::{assemble, Driver, LqDriver};
use slowfast::numcore::{pseudoinverse, Mat, Vector};

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..3, 1usize..4, 1usize..5)
}

fn vecs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn driver_ignores_y(((seed, ns, nf, m), x, z, y1, y2) in dims().prop_flat_map(|d| {
        let (_, ns, nf, m) = d;
        (Just(d), vecs(ns + nf), vecs(m), -5.0..5.0f64, -5.0..5.0f64)
    })) {
        let sys = common::random_bilinear(seed, ns, nf, m);
        let cost = common::random_cost(seed, ns);
        let asys = assemble(&sys, 0.3).unwrap();
        let f = LqDriver::new(&asys, &cost).unwrap();
        prop_assert_eq!(f.eval(&x, y1, &z), f.eval(&x, y2, &z));
    }

    #[test]
    fn control_term_vanishes_on_kernel(((seed, ns, nf, m), x, w) in dims().prop_flat_map(|d| {
        let (_, ns, nf, m) = d;
        (Just(d), vecs(ns + nf), vecs(m + 2))
    })) {
        // Two more noise channels than needed leave C with a kernel.
        let sys = common::random_bilinear(seed, ns, nf, m + 2);
        let cost = common::random_cost(seed, ns);
        let asys = assemble(&sys, 0.5).unwrap();
        let c = asys.c();
        let p = Mat::identity(c.ncols(), c.ncols()) - pseudoinverse(c) * c;
        let z = p * Vector::from_vec(w);
        let f = LqDriver::new(&asys, &cost).unwrap();
        let got = f.eval(&x, 0.0, z.as_slice());
        let want = cost.running_cost_q0(&x);
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn projection_identity(((seed, ns, nf, m), x, g, eps) in dims().prop_flat_map(|d| {
        let (_, ns, nf, _) = d;
        (Just(d), vecs(ns + nf), vecs(ns + nf), 0.05..2.0f64)
    })) {
        // |b(x)ᵀ∇V|² = |b(x)ᵀ(Cᵀ)♯Cᵀ∇V|² when b(x) ∈ range(C).
        let sys = common::random_bilinear(seed, ns, nf, m);
        let asys = assemble(&sys, eps).unwrap();
        let direct: f64 = asys.control_transpose_apply(&x, &g).iter().map(|v| v * v).sum();
        let ctg = asys.c().transpose() * Vector::from_column_slice(&g);
        let projected: f64 = asys.projected_control(&x, ctg.as_slice()).iter().map(|v| v * v).sum();
        prop_assert!((direct - projected).abs() <= 1e-9 * direct.max(1.0), "{direct} vs {projected}");
    }

    #[test]
    fn unit_eps_is_unscaled((seed, ns, nf, m) in dims()) {
        let sys = common::random_bilinear(seed, ns, nf, m);
        let asys = assemble(&sys, 1.0).unwrap();
        let (a, n, b, c) = sys.stacked();
        prop_assert_eq!(asys.a(), &a);
        prop_assert_eq!(asys.n(), &n);
        prop_assert_eq!(asys.b(), &b);
        prop_assert_eq!(asys.c(), &c);
    }

    #[test]
    fn fast_rows_scale_with_eps(((seed, ns, nf, m), eps) in (dims(), 0.01..4.0f64)) {
        let sys = common::random_bilinear(seed, ns, nf, m);
        let asys = assemble(&sys, eps).unwrap();
        let (a, _, b, c) = sys.stacked();
        let h = eps.powf(-0.5);
        for i in 0..ns + nf {
            for j in 0..ns + nf {
                let scale = match (i < ns, j < ns) {
                    (true, true) => 1.0,
                    (false, false) => 1.0 / eps,
                    _ => h,
                };
                prop_assert!((asys.a()[(i, j)] - a[(i, j)] * scale).abs() <= 1e-12 * (1.0 + scale));
            }
            let row = if i < ns { 1.0 } else { h };
            for j in 0..m {
                prop_assert!((asys.c()[(i, j)] - c[(i, j)] * row).abs() <= 1e-12 * (1.0 + row));
            }
            prop_assert!((asys.b()[(i, 0)] - b[(i, 0)] * row).abs() <= 1e-12 * (1.0 + row));
        }
    }
}
