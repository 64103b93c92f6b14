//! Slow/fast bilinear control systems, quadratic costs and the FBSDE driver.
//!
//! A [`SlowFastSystem`] holds the ε-free blocks. [`assemble`] applies the time
//! scale separation and returns an [`AssembledSystem`], whose inner
//! [`ControlSystem`] is the ε-free representation that the simulation and
//! regression code consume. Reduced (homogenized) systems produce the same
//! [`ControlSystem`] type, so every downstream routine serves both.

use crate::error::{dims, Error, Result};
use crate::numcore::{
    ensure_finite, ensure_shape, ensure_square, is_symmetric, kalman_controllable,
    min_symmetric_eigenvalue, pseudoinverse, spectral_abscissa, Mat, HURWITZ_MARGIN,
};

/// Tolerance for symmetric positive semidefiniteness of cost matrices.
const PSD_TOL: f64 = 1e-12;
/// Tolerance for the projection residual of the range condition.
const RANGE_TOL: f64 = 1e-9;

/// Stopping region for the slow variables.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// Open box `lower < x < upper`, componentwise.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Open ball of the given radius centred at the origin.
    Ball { radius: f64 },
}

impl Domain {
    /// Symmetric box `(-h, h)^dim`.
    pub fn cube(dim: usize, half_width: f64) -> Self {
        Domain::Box {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
        }
    }

    pub fn contains(&self, x_slow: &[f64]) -> bool {
        match self {
            Domain::Box { lower, upper } => x_slow
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (lo, hi))| lo < x && x < hi),
            Domain::Ball { radius } => x_slow.iter().map(|v| v * v).sum::<f64>() < radius * radius,
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        match self {
            Domain::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return Err(Error::DimensionMismatch {
                        context: "domain box",
                        expected: format!("{dim} bounds"),
                        got: format!("{}/{}", lower.len(), upper.len()),
                    });
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
                    return Err(Error::Config("domain box must have lower < upper".into()));
                }
            }
            Domain::Ball { radius } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::Config(format!("ball radius must be positive, got {radius}")));
                }
            }
        }
        Ok(())
    }
}

/// Running cost `½ x₁ᵀQ₀x₁`, terminal cost `½ x₁ᵀQ₁x₁`, horizon and domain.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    q0: Mat,
    q1: Mat,
    horizon: f64,
    domain: Domain,
}

impl QuadraticCost {
    pub fn new(q0: Mat, q1: Mat, horizon: f64, domain: Domain) -> Result<Self> {
        ensure_square(&q0, "cost: Q0")?;
        let n = q0.nrows();
        ensure_shape(&q1, n, n, "cost: Q1")?;
        ensure_finite(&q0, "cost: Q0")?;
        ensure_finite(&q1, "cost: Q1")?;
        for (m, name) in [(&q0, "Q0"), (&q1, "Q1")] {
            let lam = min_symmetric_eigenvalue(m);
            if !is_symmetric(m, 1e-12) || lam < -PSD_TOL * m.amax().max(1.0) {
                return Err(Error::NotPsd(name, lam));
            }
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        domain.check(n)?;
        Ok(Self {
            q0,
            q1,
            horizon,
            domain,
        })
    }

    pub fn slow_dim(&self) -> usize {
        self.q0.nrows()
    }
    pub fn q0(&self) -> &Mat {
        &self.q0
    }
    pub fn q1(&self) -> &Mat {
        &self.q1
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn domain(&self) -> &Domain {
        &self.domain
    }
    pub fn q1_is_zero(&self) -> bool {
        self.q1.iter().all(|&v| v == 0.0)
    }

    /// `½ x₁ᵀQ₀x₁`. Only the first `slow_dim` entries of `x` are read.
    pub fn running_cost_q0(&self, x: &[f64]) -> f64 {
        0.5 * quad_form(&self.q0, x)
    }

    /// `½ x₁ᵀQ₁x₁`. Only the first `slow_dim` entries of `x` are read.
    pub fn terminal_cost_q1(&self, x: &[f64]) -> f64 {
        0.5 * quad_form(&self.q1, x)
    }
}

fn quad_form(m: &Mat, x: &[f64]) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += m[(i, j)] * x[i];
        }
        acc += col * x[j];
    }
    acc
}

/// `out = m · x` for a column-major nalgebra matrix and slices.
pub(crate) fn mat_vec(m: &Mat, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.shape();
    debug_assert_eq!(x.len(), c);
    debug_assert_eq!(out.len(), r);
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 0..c {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * xj;
        }
    }
}

/// ε-free blocks of a slow/fast bilinear control system.
///
/// `n_s` slow and `n_f` fast states, `m` noise channels and `k` controls.
/// The bilinear term `N x` multiplies the scalar control, so `N ≠ 0` requires
/// `k = 1`. A system with `n_f = 0` is a plain (unseparated) linear system;
/// the ε-scaling is then the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowFastSystem {
    pub a11: Mat,
    pub a12: Mat,
    pub a21: Mat,
    pub a22: Mat,
    pub n11: Mat,
    pub n12: Mat,
    pub n21: Mat,
    pub n22: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub c1: Mat,
    pub c2: Mat,
}

impl SlowFastSystem {
    /// Controlled Langevin dynamics with `n` positions (slow) and `n`
    /// momenta (fast), friction `gamma` and noise `sigma`; `B = C`.
    pub fn langevin(n: usize, gamma: f64, sigma: f64) -> Self {
        let eye = Mat::identity(n, n);
        let zero = Mat::zeros(n, n);
        Self {
            a11: zero.clone(),
            a12: eye.clone(),
            a21: -&eye,
            a22: &eye * -gamma,
            n11: zero.clone(),
            n12: zero.clone(),
            n21: zero.clone(),
            n22: zero.clone(),
            b1: zero.clone(),
            b2: &eye * sigma,
            c1: zero,
            c2: &eye * sigma,
        }
    }

    /// A system without fast variables: `dX = (AX + (NX + B)u)dt + C dW`.
    pub fn slow_only(a: Mat, n: Mat, b: Mat, c: Mat) -> Self {
        let ns = a.nrows();
        let (k, m) = (b.ncols(), c.ncols());
        Self {
            a11: a,
            a12: Mat::zeros(ns, 0),
            a21: Mat::zeros(0, ns),
            a22: Mat::zeros(0, 0),
            n11: n,
            n12: Mat::zeros(ns, 0),
            n21: Mat::zeros(0, ns),
            n22: Mat::zeros(0, 0),
            b1: b,
            b2: Mat::zeros(0, k),
            c1: c,
            c2: Mat::zeros(0, m),
        }
    }

    pub fn slow_dim(&self) -> usize {
        self.a11.nrows()
    }
    pub fn fast_dim(&self) -> usize {
        self.a22.nrows()
    }
    pub fn dim(&self) -> usize {
        self.slow_dim() + self.fast_dim()
    }
    pub fn noise_dim(&self) -> usize {
        self.c1.ncols()
    }
    pub fn controls(&self) -> usize {
        self.b1.ncols()
    }

    pub fn has_bilinear_term(&self) -> bool {
        [&self.n11, &self.n12, &self.n21, &self.n22]
            .iter()
            .any(|m| m.iter().any(|&v| v != 0.0))
    }

    /// Checks that all blocks conform and are finite, and that a bilinear
    /// term comes with a single control.
    pub fn check_shapes(&self) -> Result<()> {
        self.check_blocks()?;
        let k = self.controls();
        if k > 1 && self.has_bilinear_term() {
            return Err(Error::BilinearMultiControl(k));
        }
        Ok(())
    }

    /// [`check_shapes`](Self::check_shapes) without the single-control rule.
    /// Reduced systems act bilinearly on the first of several controls.
    pub fn check_blocks(&self) -> Result<()> {
        let (ns, nf) = (self.a11.nrows(), self.a22.nrows());
        let (m, k) = (self.c1.ncols(), self.b1.ncols());
        ensure_shape(&self.a11, ns, ns, "A11")?;
        ensure_shape(&self.a12, ns, nf, "A12")?;
        ensure_shape(&self.a21, nf, ns, "A21")?;
        ensure_shape(&self.a22, nf, nf, "A22")?;
        ensure_shape(&self.n11, ns, ns, "N11")?;
        ensure_shape(&self.n12, ns, nf, "N12")?;
        ensure_shape(&self.n21, nf, ns, "N21")?;
        ensure_shape(&self.n22, nf, nf, "N22")?;
        ensure_shape(&self.b1, ns, k, "B1")?;
        ensure_shape(&self.b2, nf, k, "B2")?;
        ensure_shape(&self.c1, ns, m, "C1")?;
        ensure_shape(&self.c2, nf, m, "C2")?;
        if ns == 0 || m == 0 || k == 0 {
            return Err(Error::DimensionMismatch {
                context: "system",
                expected: "at least one slow state, noise channel and control".into(),
                got: format!("n_s={ns}, m={m}, k={k}"),
            });
        }
        for (mat, name) in [
            (&self.a11, "A11"),
            (&self.a12, "A12"),
            (&self.a21, "A21"),
            (&self.a22, "A22"),
            (&self.n11, "N11"),
            (&self.n12, "N12"),
            (&self.n21, "N21"),
            (&self.n22, "N22"),
            (&self.b1, "B1"),
            (&self.b2, "B2"),
            (&self.c1, "C1"),
            (&self.c2, "C2"),
        ] {
            ensure_finite(mat, name)?;
        }
        Ok(())
    }

    /// Stacked unscaled matrices `(A, N, B, C)`, i.e. the system at ε = 1.
    pub fn stacked(&self) -> (Mat, Mat, Mat, Mat) {
        scaled_blocks(self, 1.0, 1.0)
    }
}

fn scaled_blocks(sys: &SlowFastSystem, s_half: f64, s_full: f64) -> (Mat, Mat, Mat, Mat) {
    let (ns, nf) = (sys.slow_dim(), sys.fast_dim());
    let n = ns + nf;
    let mut a = Mat::zeros(n, n);
    a.view_mut((0, 0), (ns, ns)).copy_from(&sys.a11);
    a.view_mut((0, ns), (ns, nf)).copy_from(&(&sys.a12 * s_half));
    a.view_mut((ns, 0), (nf, ns)).copy_from(&(&sys.a21 * s_half));
    a.view_mut((ns, ns), (nf, nf)).copy_from(&(&sys.a22 * s_full));
    let mut nn = Mat::zeros(n, n);
    nn.view_mut((0, 0), (ns, ns)).copy_from(&sys.n11);
    nn.view_mut((0, ns), (ns, nf)).copy_from(&sys.n12);
    nn.view_mut((ns, 0), (nf, ns)).copy_from(&(&sys.n21 * s_half));
    nn.view_mut((ns, ns), (nf, nf)).copy_from(&(&sys.n22 * s_half));
    let k = sys.controls();
    let mut b = Mat::zeros(n, k);
    b.rows_mut(0, ns).copy_from(&sys.b1);
    b.rows_mut(ns, nf).copy_from(&(&sys.b2 * s_half));
    let m = sys.noise_dim();
    let mut c = Mat::zeros(n, m);
    c.rows_mut(0, ns).copy_from(&sys.c1);
    c.rows_mut(ns, nf).copy_from(&(&sys.c2 * s_half));
    (a, nn, b, c)
}

/// ε-free controlled linear SDE `dX = (AX + b(X)u) dt + C dW` with
/// `b(x) = B + (Nx) e₁ᵀ` (the bilinear term feeds the first control).
///
/// The first `slow_dim` coordinates are the ones the cost and the domain see.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    drift: Mat,
    bilinear: Mat,
    offset: Mat,
    noise: Mat,
    slow_dim: usize,
    noise_pinv_t: Mat,
}

impl ControlSystem {
    pub fn new(drift: Mat, bilinear: Mat, offset: Mat, noise: Mat, slow_dim: usize) -> Result<Self> {
        ensure_square(&drift, "control system: A")?;
        let d = drift.nrows();
        ensure_shape(&bilinear, d, d, "control system: N")?;
        if offset.nrows() != d || offset.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                context: "control system: B",
                expected: format!("{d} rows, at least one column"),
                got: dims(offset.nrows(), offset.ncols()),
            });
        }
        if noise.nrows() != d {
            return Err(Error::DimensionMismatch {
                context: "control system: C",
                expected: format!("{d} rows"),
                got: dims(noise.nrows(), noise.ncols()),
            });
        }
        if slow_dim == 0 || slow_dim > d {
            return Err(Error::DimensionMismatch {
                context: "control system: slow dimension",
                expected: format!("1..={d}"),
                got: slow_dim.to_string(),
            });
        }
        for (m, name) in [(&drift, "A"), (&bilinear, "N"), (&offset, "B"), (&noise, "C")] {
            ensure_finite(m, name)?;
        }
        let noise_pinv_t = pseudoinverse(&noise.transpose());
        Ok(Self {
            drift,
            bilinear,
            offset,
            noise,
            slow_dim,
            noise_pinv_t,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }
    pub fn noise_dim(&self) -> usize {
        self.noise.ncols()
    }
    pub fn controls(&self) -> usize {
        self.offset.ncols()
    }
    pub fn slow_dim(&self) -> usize {
        self.slow_dim
    }
    pub fn drift(&self) -> &Mat {
        &self.drift
    }
    pub fn bilinear(&self) -> &Mat {
        &self.bilinear
    }
    pub fn offset(&self) -> &Mat {
        &self.offset
    }
    pub fn noise(&self) -> &Mat {
        &self.noise
    }
    /// `(Cᵀ)♯`, the pseudoinverse of the transposed noise matrix.
    pub fn noise_pinv_t(&self) -> &Mat {
        &self.noise_pinv_t
    }

    /// Control matrix `b(x) = B + (Nx) e₁ᵀ`, shape `d × k`.
    pub fn control_matrix(&self, x: &[f64]) -> Mat {
        let mut b = self.offset.clone();
        let mut nx = vec![0.0; self.dim()];
        mat_vec(&self.bilinear, x, &mut nx);
        for (i, v) in nx.iter().enumerate() {
            b[(i, 0)] += v;
        }
        b
    }

    /// `b(x)ᵀ (Cᵀ)♯ z`, the control-space image of a `Z` value.
    pub fn projected_control(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut v = vec![0.0; d];
        mat_vec(&self.noise_pinv_t, z, &mut v);
        self.control_transpose_apply(x, &v)
    }

    /// `b(x)ᵀ v` for a state-space vector `v`.
    pub fn control_transpose_apply(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let k = self.controls();
        let mut out: Vec<f64> = (0..k)
            .map(|j| self.offset.column(j).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        // (N x)ᵀ v = xᵀ (Nᵀ v)
        let d = self.dim();
        let mut nx_dot = 0.0;
        for j in 0..d {
            if x[j] == 0.0 {
                continue;
            }
            let col: f64 = (0..d).map(|i| self.bilinear[(i, j)] * v[i]).sum();
            nx_dot += col * x[j];
        }
        out[0] += nx_dot;
        out
    }

    /// `b(x) u` added into `out`.
    pub fn add_control(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (j, uj) in u.iter().enumerate() {
            for i in 0..d {
                out[i] += self.offset[(i, j)] * uj;
            }
        }
        if u[0] != 0.0 {
            let mut nx = vec![0.0; d];
            mat_vec(&self.bilinear, x, &mut nx);
            for i in 0..d {
                out[i] += nx[i] * u[0];
            }
        }
    }

    /// Largest residual `‖(I − CC♯) b_j(x)‖` over the points `0, e₁, …, e_d`,
    /// relative to `max(1, ‖b_j(x)‖)`.
    pub fn range_residual(&self) -> f64 {
        let d = self.dim();
        let proj = &self.noise * pseudoinverse(&self.noise);
        let complement = Mat::identity(d, d) - proj;
        let mut worst: f64 = 0.0;
        for p in 0..=d {
            let mut x = vec![0.0; d];
            if p > 0 {
                x[p - 1] = 1.0;
            }
            let b = self.control_matrix(&x);
            for j in 0..b.ncols() {
                let col = b.column(j).into_owned();
                let r = (&complement * &col).norm() / col.norm().max(1.0);
                worst = worst.max(r);
            }
        }
        worst
    }
}

/// A slow/fast system with the ε-scaling applied.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub eps: f64,
    system: ControlSystem,
}

impl AssembledSystem {
    pub fn system(&self) -> &ControlSystem {
        &self.system
    }
    pub fn a(&self) -> &Mat {
        self.system.drift()
    }
    pub fn n(&self) -> &Mat {
        self.system.bilinear()
    }
    pub fn b(&self) -> &Mat {
        self.system.offset()
    }
    pub fn c(&self) -> &Mat {
        self.system.noise()
    }
}

impl std::ops::Deref for AssembledSystem {
    type Target = ControlSystem;
    fn deref(&self) -> &ControlSystem {
        &self.system
    }
}

/// Applies the time-scale separation: `A22/ε`, `A12, A21, N21, N22, B2, C2`
/// scaled by `ε^{-1/2}`, slow rows of `N, B, C` unscaled.
pub fn assemble(sys: &SlowFastSystem, eps: f64) -> Result<AssembledSystem> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::NonpositiveEps(eps));
    }
    sys.check_shapes()?;
    let (a, n, b, c) = scaled_blocks(sys, eps.powf(-0.5), 1.0 / eps);
    Ok(AssembledSystem {
        eps,
        system: ControlSystem::new(a, n, b, c, sys.slow_dim())?,
    })
}

/// The FBSDE driver `f(x, y, z)`.
pub trait Driver: Sync {
    fn eval(&self, x: &[f64], y: f64, z: &[f64]) -> f64;
}

/// `f(x, y, z) = ½x₁ᵀQ₀x₁ − ½|b(x)ᵀ(Cᵀ)♯z|²`.
///
/// Construction verifies that `b(x)` stays in `range(C)`; without that the
/// projection identity behind the driver fails.
#[derive(Debug, Clone, Copy)]
pub struct LqDriver<'a> {
    system: &'a ControlSystem,
    cost: &'a QuadraticCost,
}

impl<'a> LqDriver<'a> {
    pub fn new(system: &'a ControlSystem, cost: &'a QuadraticCost) -> Result<Self> {
        if cost.slow_dim() != system.slow_dim() {
            return Err(Error::DimensionMismatch {
                context: "driver: cost vs system slow dimension",
                expected: system.slow_dim().to_string(),
                got: cost.slow_dim().to_string(),
            });
        }
        let r = system.range_residual();
        if r > RANGE_TOL {
            return Err(Error::RangeConditionViolated(r));
        }
        Ok(Self { system, cost })
    }
}

impl Driver for LqDriver<'_> {
    fn eval(&self, x: &[f64], _y: f64, z: &[f64]) -> f64 {
        let w = self.system.projected_control(x, z);
        self.cost.running_cost_q0(x) - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }
}

/// One line of [`ConditionReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: &'static str,
    pub passed: bool,
    /// Failing a hard item makes the problem unsuitable for the solver.
    pub hard: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionReport {
    pub items: Vec<CheckItem>,
}

impl ConditionReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed || !i.hard)
    }
    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
    fn push(&mut self, name: &'static str, passed: bool, hard: bool, detail: String) {
        self.items.push(CheckItem {
            name,
            passed,
            hard,
            detail,
        });
    }
}

/// Checks the standing assumptions on system and cost.
///
/// Shape errors are reported as a failed `shapes` item instead of an error.
pub fn validate_condition_lq(sys: &SlowFastSystem, cost: &QuadraticCost) -> ConditionReport {
    let mut report = ConditionReport::default();
    if let Err(e) = sys.check_shapes() {
        report.push("shapes", false, true, e.to_string());
        return report;
    }
    if cost.slow_dim() != sys.slow_dim() {
        report.push(
            "shapes",
            false,
            true,
            format!("cost acts on {} slow states, system has {}", cost.slow_dim(), sys.slow_dim()),
        );
        return report;
    }
    report.push("shapes", true, true, format!(
        "n_s={}, n_f={}, m={}, k={}",
        sys.slow_dim(),
        sys.fast_dim(),
        sys.noise_dim(),
        sys.controls()
    ));

    let (a, n, b, c) = sys.stacked();
    let ok = kalman_controllable(&a, &c).unwrap_or(false);
    report.push("controllable", ok, true, "(A, C) at eps = 1".into());

    match ControlSystem::new(a, n, b, c, sys.slow_dim()) {
        Ok(cs) => {
            let r = cs.range_residual();
            report.push("range_condition", r <= RANGE_TOL, true, format!("residual {r:.3e}"));
        }
        Err(e) => report.push("range_condition", false, true, e.to_string()),
    }

    if sys.fast_dim() == 0 {
        report.push("a22_hurwitz", true, true, "no fast block".into());
        report.push("fast_controllable", true, true, "no fast block".into());
    } else {
        let abscissa = spectral_abscissa(&sys.a22);
        report.push(
            "a22_hurwitz",
            abscissa < HURWITZ_MARGIN,
            true,
            format!("spectral abscissa {abscissa:.3e}"),
        );
        let ok = kalman_controllable(&sys.a22, &sys.c2).unwrap_or(false);
        report.push("fast_controllable", ok, true, "(A22, C2)".into());
    }
    report.push(
        "q1_zero",
        cost.q1_is_zero(),
        false,
        "bounded terminal condition".into(),
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn langevin_cost() -> QuadraticCost {
        QuadraticCost::new(Mat::identity(3, 3), Mat::zeros(3, 3), 0.5, Domain::cube(3, 1e6)).unwrap()
    }

    #[test]
    fn assemble_identity_scaling() {
        let sys = SlowFastSystem::langevin(3, 0.5, 1.0);
        let asys = assemble(&sys, 1.0).unwrap();
        let (a, n, b, c) = sys.stacked();
        assert_eq!(asys.a(), &a);
        assert_eq!(asys.n(), &n);
        assert_eq!(asys.b(), &b);
        assert_eq!(asys.c(), &c);
    }

    #[test]
    fn assemble_langevin_quarter() {
        let gamma = 0.5;
        let asys = assemble(&SlowFastSystem::langevin(3, gamma, 1.0), 0.25).unwrap();
        assert_abs_diff_eq!(asys.a()[(0, 3)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(asys.a()[(3, 0)], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(asys.a()[(3, 3)], 4.0 * -gamma, epsilon = 1e-15);
        assert_abs_diff_eq!(asys.c()[(3, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(asys.c()[(0, 0)], 0.0);
    }

    #[test]
    fn assemble_eps_four() {
        let mut sys = SlowFastSystem::slow_only(
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
        );
        sys.a12 = Mat::from_element(1, 1, 1.0);
        sys.a21 = Mat::from_element(1, 1, 1.0);
        sys.a22 = Mat::from_element(1, 1, 1.0);
        sys.n12 = Mat::from_element(1, 1, 1.0);
        sys.n21 = Mat::from_element(1, 1, 1.0);
        sys.n22 = Mat::from_element(1, 1, 1.0);
        sys.b2 = Mat::from_element(1, 1, 1.0);
        sys.c2 = Mat::from_element(1, 1, 1.0);
        let asys = assemble(&sys, 4.0).unwrap();
        assert_eq!(asys.a().as_slice(), &[1.0, 0.5, 0.5, 0.25]);
        assert_eq!(asys.n().as_slice(), &[1.0, 0.5, 1.0, 0.5]);
        assert_eq!(asys.b().as_slice(), &[1.0, 0.5]);
        assert_eq!(asys.c().as_slice(), &[1.0, 0.5]);
        assert!(matches!(assemble(&sys, 0.0), Err(Error::NonpositiveEps(_))));
        assert!(matches!(assemble(&sys, -1.0), Err(Error::NonpositiveEps(_))));
    }

    #[test]
    fn driver_examples() {
        let cost = langevin_cost();
        let asys = assemble(&SlowFastSystem::langevin(3, 0.5, 1.0), 1.0).unwrap();
        let f = LqDriver::new(asys.system(), &cost).unwrap();
        let x = [1.0, 1.0, 1.0, 0.3, -0.2, 0.9];
        assert_abs_diff_eq!(f.eval(&x, 0.0, &[0.0; 3]), 1.5, epsilon = 1e-15);
        // B = C: the control term reduces to -½|z|².
        let z = [0.5, -1.0, 2.0];
        assert_abs_diff_eq!(f.eval(&x, 7.0, &z), 1.5 - 0.5 * 5.25, epsilon = 1e-12);
    }

    #[test]
    fn driver_scalar_b_equals_c() {
        // m = 1, B = C = (1, 2)ᵀ, N arbitrary in range: N = C·[1, 0].
        let c = Mat::from_column_slice(2, 1, &[1.0, 2.0]);
        let n = &c * Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        let cs = ControlSystem::new(-Mat::identity(2, 2), n, c.clone(), c.clone(), 1).unwrap();
        // (Cᵀ)♯ computed explicitly: C (CᵀC)⁻¹ = C / 5.
        let expected = &c / 5.0;
        assert_abs_diff_eq!(cs.noise_pinv_t().clone(), expected, epsilon = 1e-14);
        let cost = QuadraticCost::new(Mat::identity(1, 1), Mat::zeros(1, 1), 1.0, Domain::Ball { radius: 10.0 }).unwrap();
        let f = LqDriver::new(&cs, &cost).unwrap();
        assert_abs_diff_eq!(f.eval(&[0.0, 0.0], 0.0, &[3.0]), -4.5, epsilon = 1e-12);
    }

    #[test]
    fn range_condition_violation_is_construction_time() {
        let cs = ControlSystem::new(
            -Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::zeros(2, 1),
            Mat::zeros(2, 1),
            1,
        )
        .unwrap();
        let cost = QuadraticCost::new(Mat::identity(1, 1), Mat::zeros(1, 1), 1.0, Domain::Ball { radius: 1.0 }).unwrap();
        assert!(matches!(LqDriver::new(&cs, &cost), Err(Error::RangeConditionViolated(_))));
    }

    #[test]
    fn cost_examples() {
        let cost = langevin_cost();
        assert_eq!(cost.running_cost_q0(&[0.0; 3]), 0.0);
        assert_abs_diff_eq!(cost.running_cost_q0(&[1.0, 2.0, 0.0]), 2.5, epsilon = 1e-15);
        assert_eq!(cost.terminal_cost_q1(&[4.0, -3.0, 1.0]), 0.0);
        let bad = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            QuadraticCost::new(bad, Mat::zeros(2, 2), 1.0, Domain::cube(2, 1.0)),
            Err(Error::NotPsd("Q0", _))
        ));
    }

    #[test]
    fn condition_lq_langevin_passes() {
        let r = validate_condition_lq(&SlowFastSystem::langevin(3, 0.5, 1.0), &langevin_cost());
        assert!(r.passed(), "{r:?}");
        assert!(r.items.iter().all(|i| i.passed));
    }

    #[test]
    fn condition_lq_failures() {
        let mut sys = SlowFastSystem::langevin(3, 0.5, 1.0);
        sys.a22 = Mat::identity(3, 3);
        let r = validate_condition_lq(&sys, &langevin_cost());
        assert!(!r.item("a22_hurwitz").unwrap().passed);
        assert!(!r.passed());

        let mut sys = SlowFastSystem::langevin(1, 0.5, 1.0);
        sys.c1 = Mat::zeros(1, 1);
        sys.c2 = Mat::zeros(1, 1);
        sys.b2 = Mat::zeros(1, 1);
        sys.n11 = Mat::identity(1, 1);
        let cost = QuadraticCost::new(Mat::identity(1, 1), Mat::zeros(1, 1), 0.5, Domain::cube(1, 10.0)).unwrap();
        let r = validate_condition_lq(&sys, &cost);
        assert!(!r.item("range_condition").unwrap().passed);
    }

    #[test]
    fn bilinear_needs_scalar_control() {
        let mut sys = SlowFastSystem::langevin(2, 0.5, 1.0);
        sys.n11 = Mat::identity(2, 2);
        assert!(matches!(sys.check_shapes(), Err(Error::BilinearMultiControl(2))));
    }

    #[test]
    fn domains() {
        let d = Domain::cube(2, 1.0);
        assert!(d.contains(&[0.0, 0.99]));
        assert!(!d.contains(&[0.0, 1.0]));
        let b = Domain::Ball { radius: 2.0 };
        assert!(b.contains(&[1.0, 1.0]));
        assert!(!b.contains(&[2.0, 0.0]));
    }
}
