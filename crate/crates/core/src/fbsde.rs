//! Least-squares Monte Carlo solver for the backward equation.
//!
//! The value function is represented at every time step as a combination of
//! Gaussian bumps whose centres ride along `K` auxiliary forward paths. Going
//! backwards from the horizon, step `n` regresses
//!
//! ```text
//! Y(X_{n+1}) + dt · f(X_n, Y(X_{n+1}), Cᵀ∇Y(X_n))
//! ```
//!
//! onto the bumps evaluated at `X_n`, where `Y` and `∇Y` use the coefficients
//! of step `n + 1`. Paths that already left the domain contribute the
//! terminal cost at their exit state and no running cost.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{mat_vec, ControlSystem, Domain, Driver, QuadraticCost};
use crate::numcore::{solve_least_squares, Mat, Vector};
use crate::sde::{run_path, simulate, PathEnsemble, TimeGrid};

/// Relative ridge used when a design matrix is rank deficient.
pub const RIDGE_FALLBACK: f64 = 1e-8;

/// Gaussian bumps `exp(-|μ_k(n) − x|² / 2δ)` with per-step centres.
#[derive(Debug, Clone)]
pub struct BasisSet {
    delta: f64,
    k: usize,
    dim: usize,
    n_steps: usize,
    /// `centers[(step * k + j) * dim + i]`
    centers: Vec<f64>,
}

impl BasisSet {
    /// Builds a basis from explicit centres laid out step-major.
    pub fn from_centers(delta: f64, k: usize, dim: usize, n_steps: usize, centers: Vec<f64>) -> Result<Self> {
        if !(delta > 0.0) || k == 0 || dim == 0 {
            return Err(Error::Config(format!("basis needs K >= 1 and delta > 0 (K={k}, delta={delta})")));
        }
        if centers.len() != (n_steps + 1) * k * dim {
            return Err(Error::DimensionMismatch {
                context: "basis centres",
                expected: ((n_steps + 1) * k * dim).to_string(),
                got: centers.len().to_string(),
            });
        }
        Ok(Self {
            delta,
            k,
            dim,
            n_steps,
            centers,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn len(&self) -> usize {
        self.k
    }
    pub fn is_empty(&self) -> bool {
        self.k == 0
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn center(&self, step: usize, j: usize) -> &[f64] {
        let off = (step * self.k + j) * self.dim;
        &self.centers[off..off + self.dim]
    }

    /// `out[j] = φ_j(x)` at `step`.
    pub fn eval_into(&self, step: usize, x: &[f64], out: &mut [f64]) {
        let inv = 0.5 / self.delta;
        for (j, o) in out.iter_mut().enumerate() {
            let mu = self.center(step, j);
            let r2: f64 = mu.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
            *o = (-r2 * inv).exp();
        }
    }

    fn value(&self, step: usize, alpha: &[f64], x: &[f64]) -> f64 {
        let inv = 0.5 / self.delta;
        (0..self.k)
            .map(|j| {
                let mu = self.center(step, j);
                let r2: f64 = mu.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
                alpha[j] * (-r2 * inv).exp()
            })
            .sum()
    }

    /// `∇ Σ α_j φ_j(x)`, using `∇φ = φ (μ − x)/δ`.
    fn gradient_into(&self, step: usize, alpha: &[f64], x: &[f64], grad: &mut [f64]) {
        let inv = 0.5 / self.delta;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (j, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let mu = self.center(step, j);
            let r2: f64 = mu.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
            let w = a * (-r2 * inv).exp() / self.delta;
            for i in 0..self.dim {
                grad[i] += w * (mu[i] - x[i]);
            }
        }
    }
}

/// Centres follow `k` auxiliary control-free paths seeded with `seed`.
///
/// Use a seed that differs from the one of the regression ensemble.
pub fn build_basis(
    sys: &ControlSystem,
    domain: &Domain,
    x0: &[f64],
    grid: &TimeGrid,
    k: usize,
    delta: f64,
    seed: u64,
) -> Result<BasisSet> {
    if k == 0 || !(delta > 0.0) {
        return Err(Error::Config(format!("basis needs K >= 1 and delta > 0 (K={k}, delta={delta})")));
    }
    let aux = simulate(sys, domain, x0, grid, k, seed)?;
    let d = sys.dim();
    let n = grid.n_steps();
    let mut centers = Vec::with_capacity((n + 1) * k * d);
    for s in 0..=n {
        for j in 0..k {
            centers.extend_from_slice(aux.state(j, s));
        }
    }
    BasisSet::from_centers(delta, k, d, n, centers)
}

/// Regression coefficients for every time step.
#[derive(Debug, Clone)]
pub struct ValueField {
    basis: BasisSet,
    /// `alpha[n * K + k]`
    alpha: Vec<f64>,
    ridge_used: Vec<f64>,
    rank_report: Vec<usize>,
}

impl ValueField {
    /// A field with prescribed coefficients; no regression diagnostics.
    pub fn from_coefficients(basis: BasisSet, alpha: Vec<f64>) -> Result<Self> {
        let expected = (basis.n_steps() + 1) * basis.len();
        if alpha.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "value field coefficients",
                expected: expected.to_string(),
                got: alpha.len().to_string(),
            });
        }
        let n1 = basis.n_steps() + 1;
        let k = basis.len();
        Ok(Self {
            basis,
            alpha,
            ridge_used: vec![0.0; n1],
            rank_report: vec![k; n1],
        })
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }
    pub fn n_steps(&self) -> usize {
        self.basis.n_steps()
    }
    pub fn coefficients(&self, n: usize) -> &[f64] {
        let k = self.basis.len();
        &self.alpha[n * k..(n + 1) * k]
    }
    pub fn ridge_used(&self) -> &[f64] {
        &self.ridge_used
    }
    pub fn rank_report(&self) -> &[usize] {
        &self.rank_report
    }

    /// `Y(x; n) = Σ_k α_k(n) φ_k,n(x)`.
    pub fn evaluate_value(&self, x: &[f64], n: usize) -> f64 {
        self.basis.value(n, self.coefficients(n), x)
    }

    pub fn evaluate_gradient(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.basis.dim()];
        self.basis.gradient_into(n, self.coefficients(n), x, &mut g);
        g
    }

    /// `Z = Cᵀ ∇Y(x; n)`.
    pub fn evaluate_z(&self, x: &[f64], n: usize, noise: &Mat) -> Vec<f64> {
        let g = self.evaluate_gradient(x, n);
        let mut z = vec![0.0; noise.ncols()];
        mat_vec(&noise.transpose(), &g, &mut z);
        z
    }

    /// Estimate of the value function at time 0.
    pub fn value_at_start(&self, x0: &[f64]) -> f64 {
        self.evaluate_value(x0, 0)
    }

    /// `step,k,alpha,c0..c{d-1}` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "step,k,alpha")?;
        for i in 0..self.basis.dim() {
            write!(w, ",c{i}")?;
        }
        writeln!(w)?;
        for n in 0..=self.n_steps() {
            for (j, a) in self.coefficients(n).iter().enumerate() {
                write!(w, "{n},{j},{a}")?;
                for c in self.basis.center(n, j) {
                    write!(w, ",{c}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Which data a single backward step touched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepAccess {
    pub step: usize,
    pub state_steps: Vec<usize>,
    pub coefficient_steps: Vec<usize>,
}

/// The ensemble restricted to one time step.
#[derive(Clone, Copy)]
struct StepView<'a> {
    ens: &'a PathEnsemble,
    step: usize,
}

impl StepView<'_> {
    fn state(&self, path: usize) -> &[f64] {
        self.ens.state(path, self.step)
    }
    /// Whether the path had already stopped at or before this step.
    fn stopped(&self, path: usize) -> bool {
        self.step >= self.ens.exit_index(path)
    }
}

/// Terminal payoff, read on the full state.
pub type Terminal<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// Runs the backward regression on a simulated ensemble.
///
/// `terminal` gives the value on stopping (`q1`), `noise` is the `C` of the
/// forward system so that `Z = Cᵀ∇Y`.
pub fn backward_solve(
    ensemble: &PathEnsemble,
    basis: &BasisSet,
    driver: &dyn Driver,
    terminal: Terminal<'_>,
    noise: &Mat,
) -> Result<ValueField> {
    solve_impl(ensemble, basis, driver, terminal, noise, None)
}

/// [`backward_solve`] that also records which steps each regression read.
pub fn backward_solve_traced(
    ensemble: &PathEnsemble,
    basis: &BasisSet,
    driver: &dyn Driver,
    terminal: Terminal<'_>,
    noise: &Mat,
) -> Result<(ValueField, Vec<StepAccess>)> {
    let mut trace = Vec::new();
    let vf = solve_impl(ensemble, basis, driver, terminal, noise, Some(&mut trace))?;
    Ok((vf, trace))
}

fn design_matrix(basis: &BasisSet, view: StepView<'_>, m: usize) -> Mat {
    let k = basis.len();
    let mut rows = vec![0.0; m * k];
    rows.par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, row)| basis.eval_into(view.step, view.state(i), row));
    Mat::from_row_slice(m, k, &rows)
}

struct Regression {
    alpha: Vector,
    rank: usize,
    ridge: f64,
}

fn regress(design: &Mat, target: &Vector, step: usize) -> Result<Regression> {
    let k = design.ncols();
    let mut ls = solve_least_squares(design, target, 0.0)?;
    if ls.rank < k {
        let ridge = RIDGE_FALLBACK * ls.max_singular_value.powi(2);
        if ridge > 0.0 {
            let rank = ls.rank;
            ls = solve_least_squares(design, target, ridge)?;
            ls.rank = rank;
        }
    }
    if !ls.coeffs.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateDesign { step, rank: ls.rank });
    }
    Ok(Regression {
        alpha: ls.coeffs,
        rank: ls.rank,
        ridge: ls.ridge,
    })
}

fn solve_impl(
    ens: &PathEnsemble,
    basis: &BasisSet,
    driver: &dyn Driver,
    terminal: Terminal<'_>,
    noise: &Mat,
    mut trace: Option<&mut Vec<StepAccess>>,
) -> Result<ValueField> {
    let n_steps = ens.n_steps();
    if basis.n_steps() != n_steps || basis.dim() != ens.dim() {
        return Err(Error::DimensionMismatch {
            context: "backward_solve: basis vs ensemble",
            expected: format!("{} steps, dim {}", n_steps, ens.dim()),
            got: format!("{} steps, dim {}", basis.n_steps(), basis.dim()),
        });
    }
    if noise.nrows() != ens.dim() {
        return Err(Error::DimensionMismatch {
            context: "backward_solve: noise matrix",
            expected: format!("{} rows", ens.dim()),
            got: format!("{} rows", noise.nrows()),
        });
    }
    let m = ens.n_paths();
    let k = basis.len();
    let dt = ens.dt();
    let noise_t = noise.transpose();

    let mut alpha = vec![0.0; (n_steps + 1) * k];
    let mut ridge_used = vec![0.0; n_steps + 1];
    let mut rank_report = vec![0; n_steps + 1];

    // Terminal fit, only needed for Z at the last step.
    let last = StepView { ens, step: n_steps };
    let mut design_next = design_matrix(basis, last, m);
    let target = Vector::from_iterator(m, (0..m).map(|i| terminal(last.state(i))));
    let fit = regress(&design_next, &target, n_steps)?;
    alpha[n_steps * k..].copy_from_slice(fit.alpha.as_slice());
    ridge_used[n_steps] = fit.ridge;
    rank_report[n_steps] = fit.rank;
    if let Some(t) = trace.as_deref_mut() {
        t.push(StepAccess {
            step: n_steps,
            state_steps: vec![n_steps],
            coefficient_steps: vec![],
        });
    }

    for n in (0..n_steps).rev() {
        let here = StepView { ens, step: n };
        let next = StepView { ens, step: n + 1 };
        let (head, tail) = alpha.split_at_mut((n + 1) * k);
        let alpha_next = &tail[..k];
        let y_next_fit = &design_next * Vector::from_column_slice(alpha_next);

        let target: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|i| {
                let x = here.state(i);
                if here.stopped(i) {
                    return terminal(x);
                }
                let y_next = if next.stopped(i) {
                    terminal(next.state(i))
                } else {
                    y_next_fit[i]
                };
                let mut grad = vec![0.0; basis.dim()];
                basis.gradient_into(n + 1, alpha_next, x, &mut grad);
                let mut z = vec![0.0; noise_t.nrows()];
                mat_vec(&noise_t, &grad, &mut z);
                y_next + dt * driver.eval(x, y_next, &z)
            })
            .collect();

        let design = design_matrix(basis, here, m);
        let fit = regress(&design, &Vector::from_vec(target), n)?;
        head[n * k..].copy_from_slice(fit.alpha.as_slice());
        ridge_used[n] = fit.ridge;
        rank_report[n] = fit.rank;
        if let Some(t) = trace.as_deref_mut() {
            t.push(StepAccess {
                step: n,
                state_steps: vec![here.step, next.step],
                coefficient_steps: vec![n + 1],
            });
        }
        design_next = design;
    }

    Ok(ValueField {
        basis: basis.clone(),
        alpha,
        ridge_used,
        rank_report,
    })
}

/// Optimal feedback `u = −b(x)ᵀ (Cᵀ)♯ Z(x)` read off a value field.
pub fn extract_control(vf: &ValueField, sys: &ControlSystem, x: &[f64], n: usize) -> Vec<f64> {
    let z = vf.evaluate_z(x, n, sys.noise());
    sys.projected_control(x, &z).into_iter().map(|v| -v).collect()
}

/// A state feedback law `u = κ(n, x)`.
pub trait Feedback: Sync {
    fn controls(&self) -> usize;
    fn control(&self, step: usize, x: &[f64]) -> Vec<f64>;
}

/// `u ≡ 0`.
pub struct ZeroFeedback(pub usize);

impl Feedback for ZeroFeedback {
    fn controls(&self) -> usize {
        self.0
    }
    fn control(&self, _step: usize, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

/// Feedback from a value field solved on the same system it controls.
pub struct FieldFeedback<'a> {
    pub field: &'a ValueField,
    pub system: &'a ControlSystem,
}

impl Feedback for FieldFeedback<'_> {
    fn controls(&self) -> usize {
        self.system.controls()
    }
    fn control(&self, step: usize, x: &[f64]) -> Vec<f64> {
        extract_control(self.field, self.system, x, step)
    }
}

/// Feedback from a reduced value field applied to a full state.
///
/// Reads only the leading (slow) coordinates and keeps the first `controls`
/// entries of the reduced control, which are the ones acting through the
/// original control channel.
pub struct ReducedFeedback<'a> {
    pub field: &'a ValueField,
    pub reduced: &'a ControlSystem,
    pub controls: usize,
}

impl Feedback for ReducedFeedback<'_> {
    fn controls(&self) -> usize {
        self.controls
    }
    fn control(&self, step: usize, x: &[f64]) -> Vec<f64> {
        let slow = &x[..self.reduced.dim()];
        let mut u = extract_control(self.field, self.reduced, slow, step);
        u.truncate(self.controls);
        u
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Simulates the controlled Euler dynamics and averages the realised cost
/// `∫(½x₁ᵀQ₀x₁ + ½|u|²) dt + ½x₁ᵀQ₁x₁` up to the stopping time.
pub fn apply_control_and_cost(
    sys: &ControlSystem,
    cost: &QuadraticCost,
    feedback: &dyn Feedback,
    x0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<CostEstimate> {
    crate::sde::check_initial_state(sys, cost.domain(), x0)?;
    if feedback.controls() != sys.controls() {
        return Err(Error::DimensionMismatch {
            context: "feedback controls",
            expected: sys.controls().to_string(),
            got: feedback.controls().to_string(),
        });
    }
    if n_paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    let dt = grid.dt();
    let costs: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut running = 0.0;
            let mut last = x0.to_vec();
            run_path(
                sys,
                cost.domain(),
                x0,
                grid,
                seed,
                p as u64,
                |step, x, drift| {
                    let u = feedback.control(step, x);
                    let u2: f64 = u.iter().map(|v| v * v).sum();
                    running += (cost.running_cost_q0(x) + 0.5 * u2) * dt;
                    sys.add_control(x, &u, drift);
                },
                |_, x| last.copy_from_slice(x),
            );
            running + cost.terminal_cost_q1(&last)
        })
        .collect();
    Ok(mean_and_error(&costs))
}

pub(crate) fn mean_and_error(xs: &[f64]) -> CostEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    CostEstimate {
        mean,
        std_err: (var / n).sqrt(),
    }
}
