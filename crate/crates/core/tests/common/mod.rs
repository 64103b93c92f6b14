#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slowfast::model::{Domain, QuadraticCost, SlowFastSystem};
use slowfast::numcore::Mat;

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Bilinear slow/fast system whose control channel lies in range(C) by
/// construction: `N = C G`, `B = C h`. `A22` has a negative definite
/// symmetric part, hence is Hurwitz.
pub fn random_bilinear(seed: u64, ns: usize, nf: usize, m: usize) -> SlowFastSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ns + nf;
    let c = random_mat(&mut rng, n, m);
    let g = random_mat(&mut rng, m, n) * 0.7;
    let h = random_mat(&mut rng, m, 1);
    let nmat = &c * g;
    let b = &c * h;
    let k = random_mat(&mut rng, nf, nf);
    let s = random_mat(&mut rng, nf, nf);
    let a22 = (&k - k.transpose()) - (s.transpose() * &s + Mat::identity(nf, nf) * 0.5);
    SlowFastSystem {
        a11: random_mat(&mut rng, ns, ns),
        a12: random_mat(&mut rng, ns, nf),
        a21: random_mat(&mut rng, nf, ns),
        a22,
        n11: nmat.view((0, 0), (ns, ns)).into_owned(),
        n12: nmat.view((0, ns), (ns, nf)).into_owned(),
        n21: nmat.view((ns, 0), (nf, ns)).into_owned(),
        n22: nmat.view((ns, ns), (nf, nf)).into_owned(),
        b1: b.rows(0, ns).into_owned(),
        b2: b.rows(ns, nf).into_owned(),
        c1: c.rows(0, ns).into_owned(),
        c2: c.rows(ns, nf).into_owned(),
    }
}

pub fn random_cost(seed: u64, ns: usize) -> QuadraticCost {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let h = random_mat(&mut rng, ns, ns);
    QuadraticCost::new(&h * h.transpose(), Mat::zeros(ns, ns), 0.5, Domain::cube(ns, 1e6)).unwrap()
}

pub fn identity_cost(ns: usize, horizon: f64, half_width: f64) -> QuadraticCost {
    QuadraticCost::new(
        Mat::identity(ns, ns),
        Mat::zeros(ns, ns),
        horizon,
        Domain::cube(ns, half_width),
    )
    .unwrap()
}

/// Probe points `(x₁, z)` with standard-normal entries.
pub fn probes(seed: u64, ns: usize, m: usize, count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x: Vec<f64> = (0..ns).map(|_| rng.random_range(-1.5..1.5)).collect();
            let z: Vec<f64> = (0..m).map(|_| rng.random_range(-1.5..1.5)).collect();
            (x, z)
        })
        .collect()
}
