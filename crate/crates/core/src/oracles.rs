//! Reference values that do not go through the regression solver.
//!
//! * [`riccati_solve`]: the classical LQG solution `V = ½xᵀPx + c` for linear
//!   dynamics on an unbounded domain.
//! * [`feynman_kac_value`]: `V = −log E[exp(−∫q0 − q1)]` over control-free
//!   paths, valid when `N = 0` and `B = C`.
//! * [`quadrature_average_driver`]: the driver averaged over the invariant
//!   Gaussian of the fast variables, by tensor Gauss–Hermite quadrature.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbsde::{mean_and_error, CostEstimate};
use crate::model::{ControlSystem, Driver, LqDriver, QuadraticCost, SlowFastSystem};
use crate::numcore::{cholesky_factor, Mat};
use crate::sde::{run_path, PathNoise, TimeGrid};

/// Maximum change allowed when halving the Riccati step.
pub const RICCATI_HALVING_TOL: f64 = 1e-8;

/// Gauss–Hermite order used per fast dimension.
pub const QUADRATURE_ORDER: usize = 10;

/// Tensor grids are used up to this many fast dimensions; beyond, Monte Carlo.
pub const MAX_QUADRATURE_DIM: usize = 6;

const FALLBACK_SAMPLES: usize = 1_000_000;

/// Backward solution of the Riccati and offset equations on a uniform grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    grid: TimeGrid,
    p: Vec<Mat>,
    c: Vec<f64>,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    /// `P(t_j)`.
    pub fn p(&self, j: usize) -> &Mat {
        &self.p[j]
    }
    /// `c(t_j)`.
    pub fn offset(&self, j: usize) -> f64 {
        self.c[j]
    }
    /// `½ xᵀ P(t_j) x + c(t_j)`.
    pub fn value(&self, x: &[f64], j: usize) -> f64 {
        let xv = Mat::from_column_slice(x.len(), 1, x);
        0.5 * (xv.transpose() * &self.p[j] * &xv)[(0, 0)] + self.c[j]
    }
    pub fn value_at_start(&self, x: &[f64]) -> f64 {
        self.value(x, 0)
    }
}

struct RiccatiRhs<'a> {
    a: &'a Mat,
    bbt: Mat,
    cct: Mat,
    q: &'a Mat,
}

impl RiccatiRhs<'_> {
    /// Derivative in reversed time `s = T − t`.
    fn eval(&self, p: &Mat) -> (Mat, f64) {
        let dp = self.q + self.a.transpose() * p + p * self.a - p * &self.bbt * p;
        let dc = 0.5 * (&self.cct * p).trace();
        (dp, dc)
    }
}

fn riccati_sweep(rhs: &RiccatiRhs<'_>, terminal: &Mat, n_steps: usize, h: f64) -> (Vec<Mat>, Vec<f64>) {
    let mut ps = vec![terminal.clone()];
    let mut cs = vec![0.0];
    let mut p = terminal.clone();
    let mut c = 0.0;
    for _ in 0..n_steps {
        let (k1, l1) = rhs.eval(&p);
        let (k2, l2) = rhs.eval(&(&p + &k1 * (0.5 * h)));
        let (k3, l3) = rhs.eval(&(&p + &k2 * (0.5 * h)));
        let (k4, l4) = rhs.eval(&(&p + &k3 * h));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        p = (&p + p.transpose()) * 0.5;
        c += (l1 + 2.0 * l2 + 2.0 * l3 + l4) * (h / 6.0);
        ps.push(p.clone());
        cs.push(c);
    }
    ps.reverse();
    cs.reverse();
    (ps, cs)
}

/// Integrates `−Ṗ = Q + AᵀP + PA − P BBᵀ P`, `−ċ = ½ tr(CCᵀP)` backwards
/// from `P(T) = Q1`, `c(T) = 0` with classical RK4.
///
/// The solve is repeated with half the step; if `P(0)` or `c(0)` moves by
/// more than [`RICCATI_HALVING_TOL`] the step is rejected.
pub fn riccati_solve(
    a: &Mat,
    bc: &Mat,
    c: &Mat,
    q: &Mat,
    q1: &Mat,
    horizon: f64,
    dt_ode: f64,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    for (m, rows, name) in [(bc, n, "riccati: B"), (c, n, "riccati: C")] {
        if m.nrows() != rows {
            return Err(Error::DimensionMismatch {
                context: name,
                expected: format!("{rows} rows"),
                got: m.nrows().to_string(),
            });
        }
    }
    crate::numcore::ensure_shape(a, n, n, "riccati: A")?;
    crate::numcore::ensure_shape(q, n, n, "riccati: Q")?;
    crate::numcore::ensure_shape(q1, n, n, "riccati: Q1")?;
    let grid = TimeGrid::new(dt_ode, horizon)?;
    let rhs = RiccatiRhs {
        a,
        bbt: bc * bc.transpose(),
        cct: c * c.transpose(),
        q,
    };
    let (p, cs) = riccati_sweep(&rhs, q1, grid.n_steps(), dt_ode);
    let (p_half, c_half) = riccati_sweep(&rhs, q1, 2 * grid.n_steps(), 0.5 * dt_ode);
    let change = (&p[0] - &p_half[0]).amax().max((cs[0] - c_half[0]).abs());
    if !(change <= RICCATI_HALVING_TOL) {
        return Err(Error::StepTooCoarse(change));
    }
    Ok(RiccatiSolution { grid, p, c: cs })
}

fn embed_slow(m: &Mat, dim: usize) -> Mat {
    let mut out = Mat::zeros(dim, dim);
    out.view_mut((0, 0), m.shape()).copy_from(m);
    out
}

/// [`riccati_solve`] for a linear control system and a quadratic cost.
pub fn riccati_for(sys: &ControlSystem, cost: &QuadraticCost, dt_ode: f64) -> Result<RiccatiSolution> {
    if sys.bilinear().iter().any(|&v| v != 0.0) {
        return Err(Error::Config("Riccati oracle needs N = 0".into()));
    }
    let d = sys.dim();
    riccati_solve(
        sys.drift(),
        sys.offset(),
        sys.noise(),
        &embed_slow(cost.q0(), d),
        &embed_slow(cost.q1(), d),
        cost.horizon(),
        dt_ode,
    )
}

/// Whether `N = 0` and `B = C`, the premise of the log-transform duality.
pub fn duality_applies(sys: &ControlSystem) -> bool {
    let n_zero = sys.bilinear().iter().all(|&v| v == 0.0);
    let b = sys.offset();
    let c = sys.noise();
    n_zero && b.shape() == c.shape() && (b - c).amax() <= 1e-12 * c.amax().max(1.0)
}

/// `V = −log E[exp(−Σ q0(X_n)Δt − q1(X_stop))]` over control-free Euler paths.
///
/// The average is taken with a log-sum-exp shift; the standard error is the
/// delta-method propagation of the weights' standard error through the log.
pub fn feynman_kac_value(
    sys: &ControlSystem,
    cost: &QuadraticCost,
    x0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<CostEstimate> {
    if !duality_applies(sys) {
        return Err(Error::DualityPremise);
    }
    crate::sde::check_initial_state(sys, cost.domain(), x0)?;
    let dt = grid.dt();
    let actions: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            let mut last = x0.to_vec();
            run_path(sys, cost.domain(), x0, grid, seed, p as u64, |_, _, _| {}, |step, x| {
                if step > 0 {
                    acc += cost.running_cost_q0(&last) * dt;
                }
                last.copy_from_slice(x);
            });
            acc + cost.terminal_cost_q1(&last)
        })
        .collect();
    log_mean_exp_neg(&actions)
}

fn log_mean_exp_neg(actions: &[f64]) -> Result<CostEstimate> {
    let shift = actions.iter().cloned().fold(f64::INFINITY, f64::min);
    if !shift.is_finite() {
        return Err(Error::DegenerateExponential);
    }
    let weights: Vec<f64> = actions.iter().map(|s| (-(s - shift)).exp()).collect();
    let w = mean_and_error(&weights);
    if !(w.mean > 0.0) || !w.mean.is_finite() {
        return Err(Error::DegenerateExponential);
    }
    Ok(CostEstimate {
        mean: shift - w.mean.ln(),
        std_err: w.std_err / w.mean,
    })
}

/// Probabilists' Gauss–Hermite rule: `E[g(ξ)] ≈ Σ wᵢ g(xᵢ)` for `ξ ~ N(0, 1)`.
///
/// Nodes and weights come from the Golub–Welsch eigenproblem of the Jacobi
/// matrix with off-diagonal `√i`. Exact for polynomials of degree `2·order − 1`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Hermite order must be positive");
        let mut jacobi = Mat::zeros(order, order);
        for i in 1..order {
            let b = (i as f64).sqrt();
            jacobi[(i - 1, i)] = b;
            jacobi[(i, i - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        // The rule is symmetric about 0; enforce it so odd moments vanish exactly.
        let nodes = (0..order).map(|i| 0.5 * (pairs[i].0 - pairs[order - 1 - i].0)).collect();
        let weights = (0..order)
            .map(|i| 0.5 * (pairs[i].1 + pairs[order - 1 - i].1) / total)
            .collect();
        Self { nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[g(ξ)]`, `ξ ~ N(0, I_dim)`, on the tensor grid.
    pub fn expectation(&self, dim: usize, mut g: impl FnMut(&[f64]) -> f64) -> f64 {
        let q = self.nodes.len();
        let mut idx = vec![0usize; dim];
        let mut point = vec![0.0; dim];
        let mut total = 0.0;
        loop {
            let mut w = 1.0;
            for (p, &i) in point.iter_mut().zip(&idx) {
                *p = self.nodes[i];
                w *= self.weights[i];
            }
            total += w * g(&point);
            // odometer increment
            let mut pos = 0;
            loop {
                if pos == dim {
                    return total;
                }
                idx[pos] += 1;
                if idx[pos] < q {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }
}

/// A point `(x₁, z)` at which to evaluate the averaged driver; `z` has the
/// noise dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverProbe {
    pub x_slow: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingMethod {
    GaussHermite,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedValues {
    pub values: Vec<f64>,
    /// Present for Monte Carlo averages.
    pub std_errs: Option<Vec<f64>>,
    pub method: AveragingMethod,
}

fn unit_system(sys: &SlowFastSystem) -> Result<ControlSystem> {
    sys.check_shapes()?;
    let (a, n, b, c) = sys.stacked();
    ControlSystem::new(a, n, b, c, sys.slow_dim())
}

fn check_sigma(sys: &SlowFastSystem, sigma: &Mat) -> Result<Mat> {
    let nf = sys.fast_dim();
    crate::numcore::ensure_shape(sigma, nf, nf, "invariant covariance")?;
    if nf == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    cholesky_factor(sigma, "invariant covariance")
}

fn check_probes(sys: &SlowFastSystem, probes: &[DriverProbe]) -> Result<()> {
    for p in probes {
        if p.x_slow.len() != sys.slow_dim() || p.z.len() != sys.noise_dim() {
            return Err(Error::DimensionMismatch {
                context: "driver probe",
                expected: format!("x1 of {} and z of {}", sys.slow_dim(), sys.noise_dim()),
                got: format!("x1 of {} and z of {}", p.x_slow.len(), p.z.len()),
            });
        }
    }
    Ok(())
}

/// `E_{x₂~N(0,Σ)} f((x₁, x₂), ·, z)` at every probe.
///
/// The driver does not depend on ε, so it is evaluated on the unscaled
/// system. Uses a tensor Gauss–Hermite grid of [`QUADRATURE_ORDER`] nodes per
/// fast dimension, whitened by the Cholesky factor of `Σ`; above
/// [`MAX_QUADRATURE_DIM`] fast dimensions it switches to Monte Carlo.
pub fn quadrature_average_driver(
    sys: &SlowFastSystem,
    cost: &QuadraticCost,
    sigma: &Mat,
    probes: &[DriverProbe],
) -> Result<AveragedValues> {
    if sys.fast_dim() > MAX_QUADRATURE_DIM {
        return mc_average_driver(sys, cost, sigma, probes, FALLBACK_SAMPLES, 0x9A55);
    }
    check_probes(sys, probes)?;
    let chol = check_sigma(sys, sigma)?;
    let cs = unit_system(sys)?;
    let f = LqDriver::new(&cs, cost)?;
    let rule = GaussHermite::new(QUADRATURE_ORDER);
    let (ns, nf) = (sys.slow_dim(), sys.fast_dim());
    let values = probes
        .iter()
        .map(|p| {
            let mut x = vec![0.0; ns + nf];
            x[..ns].copy_from_slice(&p.x_slow);
            rule.expectation(nf, |xi| {
                for i in 0..nf {
                    x[ns + i] = (0..=i).map(|j| chol[(i, j)] * xi[j]).sum();
                }
                f.eval(&x, 0.0, &p.z)
            })
        })
        .collect();
    Ok(AveragedValues {
        values,
        std_errs: None,
        method: AveragingMethod::GaussHermite,
    })
}

/// Plain Monte Carlo version of [`quadrature_average_driver`].
pub fn mc_average_driver(
    sys: &SlowFastSystem,
    cost: &QuadraticCost,
    sigma: &Mat,
    probes: &[DriverProbe],
    samples: usize,
    seed: u64,
) -> Result<AveragedValues> {
    check_probes(sys, probes)?;
    let chol = check_sigma(sys, sigma)?;
    let cs = unit_system(sys)?;
    let f = LqDriver::new(&cs, cost)?;
    let (ns, nf) = (sys.slow_dim(), sys.fast_dim());
    let estimates: Vec<CostEstimate> = probes
        .par_iter()
        .enumerate()
        .map(|(pi, p)| {
            let mut noise = PathNoise::new(seed, pi as u64, nf.max(1));
            let mut xi = vec![0.0; nf.max(1)];
            let mut x = vec![0.0; ns + nf];
            x[..ns].copy_from_slice(&p.x_slow);
            let draws: Vec<f64> = (0..samples)
                .map(|_| {
                    noise.next_into(&mut xi);
                    for i in 0..nf {
                        x[ns + i] = (0..=i).map(|j| chol[(i, j)] * xi[j]).sum();
                    }
                    f.eval(&x, 0.0, &p.z)
                })
                .collect();
            mean_and_error(&draws)
        })
        .collect();
    Ok(AveragedValues {
        values: estimates.iter().map(|e| e.mean).collect(),
        std_errs: Some(estimates.iter().map(|e| e.std_err).collect()),
        method: AveragingMethod::MonteCarlo,
    })
}
