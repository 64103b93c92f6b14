//! Homogenized (ε → 0) control problem for the slow variables.
//!
//! The fast block relaxes to `N(0, Σ)` with `A22 Σ + Σ A22ᵀ + C2 C2ᵀ = 0`.
//! The slow forward coefficients are the usual Schur complements, and the
//! driver is averaged over `Σ`.
//!
//! # Averaged driver
//!
//! With `C♯` the pseudoinverse of the stacked noise matrix (at ε = 1),
//! `b(x)ᵀ(Cᵀ)♯z = (C♯b(x))ᵀz`, and `C♯b(x) = H + (G x)e₁ᵀ` with `H = C♯B`,
//! `G = C♯N`. This quantity does not depend on ε. Splitting `G = [G1 G2]`
//! by slow and fast columns, the Gaussian average of the squared control term
//! is
//!
//! ```text
//! E|C♯b(x)ᵀz|² = |(H + (G1 x₁)e₁ᵀ)ᵀz|² + |Lᵀ G2ᵀ z|²,   L Lᵀ = Σ,
//! ```
//!
//! so `f̄(x₁, z) = ½x₁ᵀQ₀x₁ − ½|(N̄x₁ e₁ᵀ + B̄)ᵀz|² + K₀` with `N̄ = G1` and
//! `B̄ = [H | G2 L]`. The extra columns of `B̄` act as additional reduced
//! controls; they are dropped when `G2 = 0`. [`averaged_driver`] checks the
//! result against Gauss–Hermite quadrature of the original driver.

use serde::{Deserialize, Serialize};

use crate::config::{mat_to_rows, rows_to_mat, Rows, SystemSection};
use crate::error::{Error, Result};
use crate::model::{ControlSystem, Driver, QuadraticCost, SlowFastSystem};
use crate::numcore::{
    cholesky_factor, is_hurwitz, kalman_controllable, min_symmetric_eigenvalue, pseudoinverse,
    solve_lyapunov, spectral_abscissa, Mat,
};
use crate::oracles::{quadrature_average_driver, DriverProbe};
use crate::sde::sample_increments;

/// Relative tolerance between the closed form and the quadrature oracle.
pub const AVERAGING_TOL: f64 = 1e-6;

/// Number of probe points used to check the averaged driver.
pub const AVERAGING_PROBES: usize = 20;

const PROBE_SEED: u64 = 0x00A7_E2A6;

/// Homogenized coefficients of the slow control problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSystem {
    pub abar: Mat,
    pub cbar: Mat,
    /// Invariant covariance of the fast block.
    pub sigma: Mat,
    /// `m × n_s`.
    pub nbar: Mat,
    /// `m × k̄`, `k̄ ≥ k`.
    pub bbar: Mat,
    pub k0: f64,
    pub q0bar: Mat,
    pub q1bar: Mat,
    /// Number of controls of the original system; the leading columns of `B̄`.
    pub controls: usize,
}

impl ReducedSystem {
    pub fn slow_dim(&self) -> usize {
        self.abar.nrows()
    }
    /// `M̄ = C̄ N̄`.
    pub fn mbar(&self) -> Mat {
        &self.cbar * &self.nbar
    }
    /// `D̄ = C̄ B̄`.
    pub fn dbar(&self) -> Mat {
        &self.cbar * &self.bbar
    }
    pub fn driver(&self) -> AveragedDriver {
        AveragedDriver {
            q0bar: self.q0bar.clone(),
            nbar: self.nbar.clone(),
            bbar: self.bbar.clone(),
            k0: self.k0,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&ReducedRepr::from(self)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let repr: ReducedRepr = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        repr.try_into()
    }
}

/// `f̄(x₁, y, z) = ½x₁ᵀQ̄₀x₁ − ½|(N̄x₁ e₁ᵀ + B̄)ᵀz|² + K₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedDriver {
    pub q0bar: Mat,
    pub nbar: Mat,
    pub bbar: Mat,
    pub k0: f64,
}

impl Driver for AveragedDriver {
    fn eval(&self, x: &[f64], _y: f64, z: &[f64]) -> f64 {
        let ns = self.q0bar.nrows();
        let x1 = &x[..ns];
        let mut quad = 0.0;
        for j in 0..ns {
            let col: f64 = (0..ns).map(|i| self.q0bar[(i, j)] * x1[i]).sum();
            quad += col * x1[j];
        }
        let mut control = 0.0;
        for j in 0..self.bbar.ncols() {
            let mut w: f64 = (0..z.len()).map(|i| self.bbar[(i, j)] * z[i]).sum();
            if j == 0 {
                for (c, xc) in x1.iter().enumerate() {
                    w += xc * (0..z.len()).map(|i| self.nbar[(i, c)] * z[i]).sum::<f64>();
                }
            }
            control += w * w;
        }
        0.5 * quad - 0.5 * control + self.k0
    }
}

/// `Σ` solving `A22 Σ + Σ A22ᵀ + C2 C2ᵀ = 0`, checked positive definite.
pub fn invariant_covariance(sys: &SlowFastSystem) -> Result<Mat> {
    sys.check_shapes()?;
    if sys.fast_dim() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let q = &sys.c2 * sys.c2.transpose();
    let sigma = solve_lyapunov(&sys.a22, &q)?;
    let lo = min_symmetric_eigenvalue(&sigma);
    if !(lo > 0.0) || cholesky_factor(&sigma, "invariant covariance").is_err() {
        return Err(Error::NotPositiveDefinite("invariant covariance"));
    }
    Ok(sigma)
}

/// `Ā = A11 − A12 A22⁻¹ A21`, `C̄ = C1 − A12 A22⁻¹ C2`.
pub fn reduced_forward(sys: &SlowFastSystem) -> Result<(Mat, Mat)> {
    sys.check_shapes()?;
    if sys.fast_dim() == 0 {
        return Ok((sys.a11.clone(), sys.c1.clone()));
    }
    let lu = sys.a22.clone().lu();
    let a22_inv_a21 = lu.solve(&sys.a21).ok_or(Error::SingularA22)?;
    let a22_inv_c2 = lu.solve(&sys.c2).ok_or(Error::SingularA22)?;
    if a22_inv_a21.iter().chain(a22_inv_c2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::SingularA22);
    }
    let abar = &sys.a11 - &sys.a12 * a22_inv_a21;
    let cbar = &sys.c1 - &sys.a12 * a22_inv_c2;
    Ok((abar, cbar))
}

fn closed_form(sys: &SlowFastSystem, sigma: &Mat) -> Result<(Mat, Mat)> {
    let (_, n, b, c) = sys.stacked();
    let c_pinv = pseudoinverse(&c);
    let g = &c_pinv * n;
    let h = &c_pinv * b;
    let ns = sys.slow_dim();
    let nf = sys.fast_dim();
    let nbar = g.columns(0, ns).into_owned();
    let spread = if nf > 0 {
        &g.columns(ns, nf) * cholesky_factor(sigma, "invariant covariance")?
    } else {
        Mat::zeros(h.nrows(), 0)
    };
    let bbar = if spread.iter().all(|&v| v == 0.0) {
        h
    } else {
        let mut out = Mat::zeros(h.nrows(), h.ncols() + nf);
        out.columns_mut(0, h.ncols()).copy_from(&h);
        out.columns_mut(h.ncols(), nf).copy_from(&spread);
        out
    };
    Ok((nbar, bbar))
}

/// Deterministic probe points: standard normal `x₁` and `z`.
pub fn driver_probes(sys: &SlowFastSystem, count: usize, seed: u64) -> Vec<DriverProbe> {
    let (ns, m) = (sys.slow_dim(), sys.noise_dim());
    (0..count)
        .map(|i| {
            let draw = sample_increments(seed, i as u64, 0, ns + m);
            DriverProbe {
                x_slow: draw[..ns].to_vec(),
                z: draw[ns..].to_vec(),
            }
        })
        .collect()
}

/// Averaged driver coefficients, verified against quadrature.
///
/// `K₀` is the quadrature value at `(x₁, z) = (0, 0)`. The closed form must
/// reproduce the quadrature at [`AVERAGING_PROBES`] probe points to relative
/// [`AVERAGING_TOL`], otherwise the average is reported as not representable.
pub fn averaged_driver(sys: &SlowFastSystem, cost: &QuadraticCost, sigma: &Mat) -> Result<AveragedDriver> {
    let (nbar, bbar) = closed_form(sys, sigma)?;
    let origin = DriverProbe {
        x_slow: vec![0.0; sys.slow_dim()],
        z: vec![0.0; sys.noise_dim()],
    };
    let mut probes = vec![origin];
    probes.extend(driver_probes(sys, AVERAGING_PROBES, PROBE_SEED));
    let reference = quadrature_average_driver(sys, cost, sigma, &probes)?;
    let candidate = AveragedDriver {
        q0bar: cost.q0().clone(),
        nbar,
        bbar,
        k0: reference.values[0],
    };
    for (p, want) in probes.iter().zip(&reference.values).skip(1) {
        let got = candidate.eval(&p.x_slow, 0.0, &p.z);
        let tol = match &reference.std_errs {
            Some(_) => 1e-2 * want.abs().max(1.0),
            None => AVERAGING_TOL * want.abs().max(f64::MIN_POSITIVE),
        };
        if (got - want).abs() > tol.max(1e-14) {
            return Err(Error::NotRepresentable(format!(
                "closed form {got} vs quadrature {want} at x1 = {:?}, z = {:?}",
                p.x_slow, p.z
            )));
        }
    }
    Ok(candidate)
}

/// Full reduction: covariance, forward coefficients and averaged driver.
pub fn reduce(sys: &SlowFastSystem, cost: &QuadraticCost) -> Result<ReducedSystem> {
    sys.check_shapes()?;
    if sys.fast_dim() > 0 && !is_hurwitz(&sys.a22) {
        return Err(Error::NotHurwitz("A22", spectral_abscissa(&sys.a22)));
    }
    let sigma = invariant_covariance(sys)?;
    let (abar, cbar) = reduced_forward(sys)?;
    let driver = averaged_driver(sys, cost, &sigma)?;
    Ok(ReducedSystem {
        abar,
        cbar,
        sigma,
        nbar: driver.nbar,
        bbar: driver.bbar,
        k0: driver.k0,
        q0bar: cost.q0().clone(),
        q1bar: cost.q1().clone(),
        controls: sys.controls(),
    })
}

/// The ε-free system `dX̄ = (ĀX̄ + (M̄X̄ e₁ᵀ + D̄)ū) dt + C̄ dW`.
///
/// Its projected control `b̄(x)ᵀ(C̄ᵀ)♯z` agrees with the averaged driver's
/// control term for `z ∈ range(C̄ᵀ)`, which is where `Z = C̄ᵀ∇V̄` lives.
pub fn reduced_control_system(red: &ReducedSystem) -> Result<ControlSystem> {
    let ns = red.slow_dim();
    ControlSystem::new(red.abar.clone(), red.mbar(), red.dbar(), red.cbar.clone(), ns)
}

/// Whether `(Ā, C̄)` satisfies the Kalman rank condition.
pub fn reduced_controllable(red: &ReducedSystem) -> bool {
    kalman_controllable(&red.abar, &red.cbar).unwrap_or(false)
}

/// Reduced system in the config grammar: `[system]` holds the slow-only
/// blocks `(Ā, M̄, D̄, C̄)`, `[averaged]` the rest.
#[derive(Serialize, Deserialize)]
struct ReducedRepr {
    system: SystemSection,
    averaged: AveragedSection,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AveragedSection {
    sigma: Rows,
    nbar: Rows,
    bbar: Rows,
    k0: f64,
    q0bar: Rows,
    q1bar: Rows,
    controls: usize,
}

impl From<&ReducedSystem> for ReducedRepr {
    fn from(r: &ReducedSystem) -> Self {
        let sys = SlowFastSystem::slow_only(r.abar.clone(), r.mbar(), r.dbar(), r.cbar.clone());
        Self {
            system: SystemSection::from_system(&sys),
            averaged: AveragedSection {
                sigma: mat_to_rows(&r.sigma),
                nbar: mat_to_rows(&r.nbar),
                bbar: mat_to_rows(&r.bbar),
                k0: r.k0,
                q0bar: mat_to_rows(&r.q0bar),
                q1bar: mat_to_rows(&r.q1bar),
                controls: r.controls,
            },
        }
    }
}

impl TryFrom<ReducedRepr> for ReducedSystem {
    type Error = Error;
    fn try_from(r: ReducedRepr) -> Result<Self> {
        let sys = r.system.to_blocks()?;
        let a = r.averaged;
        Ok(Self {
            abar: sys.a11,
            cbar: sys.c1,
            sigma: rows_to_mat(&a.sigma, 0, "sigma")?,
            nbar: rows_to_mat(&a.nbar, 0, "nbar")?,
            bbar: rows_to_mat(&a.bbar, 0, "bbar")?,
            k0: a.k0,
            q0bar: rows_to_mat(&a.q0bar, 0, "q0bar")?,
            q1bar: rows_to_mat(&a.q1bar, 0, "q1bar")?,
            controls: a.controls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Domain;

    fn langevin_cost(n: usize) -> QuadraticCost {
        QuadraticCost::new(Mat::identity(n, n), Mat::zeros(n, n), 0.5, Domain::cube(n, 1e6)).unwrap()
    }

    #[test]
    fn covariance_examples() {
        let sys = SlowFastSystem::langevin(3, 0.5, 1.0);
        let sigma = invariant_covariance(&sys).unwrap();
        assert!((sigma - Mat::identity(3, 3)).amax() < 1e-14);

        let mut one = SlowFastSystem::langevin(1, 1.0, 2f64.sqrt());
        let s1 = invariant_covariance(&one).unwrap();
        assert!((s1[(0, 0)] - 1.0).abs() < 1e-14);
        one.c2 *= 2.0;
        let s4 = invariant_covariance(&one).unwrap();
        assert!((s4[(0, 0)] - 4.0).abs() < 1e-13);
    }

    #[test]
    fn covariance_needs_noise_on_fast_block() {
        let mut sys = SlowFastSystem::langevin(2, 0.5, 1.0);
        sys.c2[(1, 1)] = 0.0;
        assert!(invariant_covariance(&sys).is_err());
    }

    #[test]
    fn forward_examples() {
        let (abar, cbar) = reduced_forward(&SlowFastSystem::langevin(3, 0.5, 1.0)).unwrap();
        assert_eq!(abar, Mat::identity(3, 3) * -2.0);
        assert_eq!(cbar, Mat::identity(3, 3) * 2.0);

        // Ā = 0 − (−1)(−1)⁻¹(−1) = +1.
        let i1 = Mat::identity(1, 1);
        let sys = SlowFastSystem {
            a11: Mat::zeros(1, 1),
            a12: -&i1,
            a21: -&i1,
            a22: -&i1,
            n11: Mat::zeros(1, 1),
            n12: Mat::zeros(1, 1),
            n21: Mat::zeros(1, 1),
            n22: Mat::zeros(1, 1),
            b1: i1.clone(),
            b2: Mat::zeros(1, 1),
            c1: i1.clone(),
            c2: Mat::zeros(1, 1),
        };
        let (abar, cbar) = reduced_forward(&sys).unwrap();
        assert_eq!(abar, i1);
        assert_eq!(cbar, i1);
    }

    #[test]
    fn decoupled_slow_block_is_unchanged() {
        let mut sys = SlowFastSystem::langevin(2, 0.5, 1.0);
        sys.a11 = Mat::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        sys.a12 = Mat::zeros(2, 2);
        sys.a21 = Mat::zeros(2, 2);
        sys.c1 = Mat::identity(2, 2);
        let (abar, cbar) = reduced_forward(&sys).unwrap();
        assert_eq!(abar, sys.a11);
        assert_eq!(cbar, sys.c1);
    }

    #[test]
    fn langevin_reduction() {
        let sys = SlowFastSystem::langevin(3, 0.5, 1.0);
        let red = reduce(&sys, &langevin_cost(3)).unwrap();
        assert!((&red.bbar - Mat::identity(3, 3)).amax() < 1e-14);
        assert_eq!(red.nbar, Mat::zeros(3, 3));
        assert_eq!(red.k0, 0.0);
        assert!((red.dbar() - &red.cbar).amax() < 1e-14);
        assert!(reduced_controllable(&red));
        let cs = reduced_control_system(&red).unwrap();
        assert_eq!(cs.dim(), 3);
        assert_eq!(cs.drift(), &(Mat::identity(3, 3) * -2.0));
    }

    #[test]
    fn zero_z_gives_running_cost() {
        let sys = SlowFastSystem::langevin(2, 0.5, 1.0);
        let red = reduce(&sys, &langevin_cost(2)).unwrap();
        let f = red.driver();
        assert!((f.eval(&[1.0, 2.0], 0.3, &[0.0, 0.0]) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn reduced_system_driver_matches_on_its_range() {
        let sys = SlowFastSystem::langevin(2, 0.5, 1.0);
        let red = reduce(&sys, &langevin_cost(2)).unwrap();
        let cs = reduced_control_system(&red).unwrap();
        let cost = langevin_cost(2);
        let lq = crate::model::LqDriver::new(&cs, &cost).unwrap();
        let f = red.driver();
        for probe in driver_probes(&sys, 5, 3) {
            // z = C̄ᵀ g for an arbitrary gradient g
            let z = (red.cbar.transpose() * Mat::from_column_slice(2, 1, &probe.z)).column(0).iter().cloned().collect::<Vec<_>>();
            let a = f.eval(&probe.x_slow, 0.0, &z);
            let b = lq.eval(&probe.x_slow, 0.0, &z);
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn bilinear_fast_coupling_adds_controls() {
        let mut sys = SlowFastSystem::langevin(1, 1.0, 1.0);
        sys.c1 = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        sys.c2 = Mat::from_row_slice(1, 2, &[0.0, 1.0]);
        sys.b1 = Mat::from_element(1, 1, 0.2);
        sys.b2 = Mat::from_element(1, 1, 1.0);
        sys.n12 = Mat::from_element(1, 1, 0.7);
        sys.n22 = Mat::from_element(1, 1, -0.4);
        let cost = QuadraticCost::new(Mat::identity(1, 1), Mat::zeros(1, 1), 1.0, Domain::cube(1, 5.0)).unwrap();
        let red = reduce(&sys, &cost).unwrap();
        assert_eq!(red.bbar.shape(), (2, 2));
        assert_eq!(red.controls, 1);
    }

    #[test]
    fn toml_round_trip() {
        let sys = SlowFastSystem::langevin(2, 0.7, 1.3);
        let red = reduce(&sys, &langevin_cost(2)).unwrap();
        let text = red.to_toml().unwrap();
        assert_eq!(ReducedSystem::from_toml(&text).unwrap(), red);
    }

    #[test]
    fn slow_only_reduction_is_identity() {
        let a = Mat::from_element(1, 1, -1.0);
        let one = Mat::from_element(1, 1, 1.0);
        let sys = SlowFastSystem::slow_only(a.clone(), Mat::zeros(1, 1), one.clone(), one.clone());
        let cost = QuadraticCost::new(one.clone(), Mat::zeros(1, 1), 0.5, Domain::cube(1, 10.0)).unwrap();
        let red = reduce(&sys, &cost).unwrap();
        assert_eq!(red.abar, a);
        assert_eq!(red.cbar, one);
        assert_eq!(red.bbar, one);
        assert_eq!(red.sigma.shape(), (0, 0));
    }
}
