//! TOML experiment configuration.
//!
//! ```toml
//! [system]            # matrices as arrays of rows
//! a11 = [[0.0]]
//! a12 = [[1.0]]       # fast blocks may be omitted for n_f = 0
//! a21 = [[-1.0]]
//! a22 = [[-0.5]]
//! b1 = [[0.0]]
//! b2 = [[1.0]]
//! c1 = [[0.0]]
//! c2 = [[1.0]]        # n11 .. n22 default to zero
//!
//! [cost]
//! q0 = [[1.0]]
//! q1 = [[0.0]]        # optional, zero by default
//! horizon = 0.5
//! domain = { kind = "cube", half_width = 10.0 }
//!
//! [numerics]
//! dt = 1e-4
//! paths = 400
//! basis_full = 40
//! basis_reduced = 9
//! delta = 0.1
//!
//! [experiment]
//! eps_grid = [0.5, 0.25, 0.125]
//! repetitions = 5
//! seed = 1
//! ```
//!
//! Every field of `[numerics]` and `[experiment]` has a default. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Domain, QuadraticCost, SlowFastSystem};
use crate::numcore::Mat;

pub type Rows = Vec<Vec<f64>>;

/// Largest `dt / ε` accepted for full (ε-scaled) solves.
pub const MAX_DT_OVER_EPS: f64 = 1e-2;

/// Row-major nested vectors.
pub fn mat_to_rows(m: &Mat) -> Rows {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

/// Inverse of [`mat_to_rows`]; `cols` fixes the width when there are no rows.
pub fn rows_to_mat(rows: &[Vec<f64>], cols: usize, name: &str) -> Result<Mat> {
    let width = rows.first().map_or(cols, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Config(format!("{name}: rows have different lengths")));
    }
    Ok(Mat::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

fn block(rows: &Option<Rows>, r: usize, c: usize, name: &str) -> Result<Mat> {
    match rows {
        None => Ok(Mat::zeros(r, c)),
        Some(v) => {
            let m = rows_to_mat(v, c, name)?;
            if m.shape() != (r, c) {
                return Err(Error::Config(format!(
                    "{name} must be {r}x{c}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(m)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a11: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a12: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a21: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a22: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n11: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n12: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n21: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n22: Option<Rows>,
    pub b1: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<Rows>,
    pub c1: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<Rows>,
}

impl SystemSection {
    pub fn to_system(&self) -> Result<SlowFastSystem> {
        let sys = self.to_blocks()?;
        sys.check_shapes()?;
        Ok(sys)
    }

    /// Like [`to_system`](Self::to_system) but allows a bilinear term with
    /// several controls.
    pub fn to_blocks(&self) -> Result<SlowFastSystem> {
        let a11 = rows_to_mat(&self.a11, 0, "a11")?;
        let ns = a11.nrows();
        let nf = match &self.a22 {
            Some(r) => r.len(),
            None => 0,
        };
        let c1 = rows_to_mat(&self.c1, 0, "c1")?;
        let b1 = rows_to_mat(&self.b1, 0, "b1")?;
        let (m, k) = (c1.ncols(), b1.ncols());
        let sys = SlowFastSystem {
            a11,
            a12: block(&self.a12, ns, nf, "a12")?,
            a21: block(&self.a21, nf, ns, "a21")?,
            a22: block(&self.a22, nf, nf, "a22")?,
            n11: block(&self.n11, ns, ns, "n11")?,
            n12: block(&self.n12, ns, nf, "n12")?,
            n21: block(&self.n21, nf, ns, "n21")?,
            n22: block(&self.n22, nf, nf, "n22")?,
            b1,
            b2: block(&self.b2, nf, k, "b2")?,
            c1,
            c2: block(&self.c2, nf, m, "c2")?,
        };
        sys.check_blocks()?;
        Ok(sys)
    }

    pub fn from_system(sys: &SlowFastSystem) -> Self {
        let fast = sys.fast_dim() > 0;
        let opt = |m: &Mat| fast.then(|| mat_to_rows(m));
        let nonzero = |m: &Mat| (m.iter().any(|&v| v != 0.0)).then(|| mat_to_rows(m));
        Self {
            a11: mat_to_rows(&sys.a11),
            a12: opt(&sys.a12),
            a21: opt(&sys.a21),
            a22: opt(&sys.a22),
            n11: nonzero(&sys.n11),
            n12: nonzero(&sys.n12),
            n21: nonzero(&sys.n21),
            n22: nonzero(&sys.n22),
            b1: mat_to_rows(&sys.b1),
            b2: opt(&sys.b2),
            c1: mat_to_rows(&sys.c1),
            c2: opt(&sys.c2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSection {
    Cube { half_width: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q0: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q1: Option<Rows>,
    pub horizon: f64,
    pub domain: DomainSection,
}

impl CostSection {
    pub fn to_cost(&self) -> Result<QuadraticCost> {
        let q0 = rows_to_mat(&self.q0, 0, "q0")?;
        let ns = q0.nrows();
        let q1 = block(&self.q1, ns, ns, "q1")?;
        let domain = match &self.domain {
            DomainSection::Cube { half_width } => Domain::cube(ns, *half_width),
            DomainSection::Box { lower, upper } => Domain::Box {
                lower: lower.clone(),
                upper: upper.clone(),
            },
            DomainSection::Ball { radius } => Domain::Ball { radius: *radius },
        };
        QuadraticCost::new(q0, q1, self.horizon, domain)
    }
}

fn default_paths() -> usize {
    400
}
fn default_basis_full() -> usize {
    40
}
fn default_basis_reduced() -> usize {
    9
}
fn default_delta() -> f64 {
    0.1
}
fn default_dt() -> f64 {
    1e-4
}
fn default_oracle_paths() -> usize {
    100_000
}
fn default_oracle_seeds() -> usize {
    10
}
fn default_riccati_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Regression paths `M`.
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Basis size for the full (ε) system.
    #[serde(default = "default_basis_full")]
    pub basis_full: usize,
    /// Basis size for the reduced system.
    #[serde(default = "default_basis_reduced")]
    pub basis_reduced: usize,
    /// Gaussian width δ.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Paths for the Feynman–Kac oracle.
    #[serde(default = "default_oracle_paths")]
    pub oracle_paths: usize,
    /// Seeds averaged by the regression run of `oracle-check`.
    #[serde(default = "default_oracle_seeds")]
    pub oracle_seeds: usize,
    /// Step of the Riccati integrator.
    #[serde(default = "default_riccati_dt")]
    pub riccati_dt: f64,
}

impl Default for NumericsSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn default_eps_grid() -> Vec<f64> {
    (1..=5).map(|i| 0.5f64.powi(i)).collect()
}
fn default_repetitions() -> usize {
    5
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_eps_grid")]
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Full initial state; defaults to slow components 1 and fast components 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub cost: CostSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    /// Averaged-driver data written by `reduce`; carried along, not used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaged: Option<toml::Table>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Structural checks that do not need any linear algebra.
    pub fn check(&self) -> Result<()> {
        let n = &self.numerics;
        let e = &self.experiment;
        if !(n.dt > 0.0) || !(n.delta > 0.0) || !(n.riccati_dt > 0.0) {
            return Err(Error::Config("dt, delta and riccati_dt must be positive".into()));
        }
        if n.paths == 0 || n.basis_full == 0 || n.basis_reduced == 0 || n.oracle_paths == 0 || n.oracle_seeds == 0 {
            return Err(Error::Config("path and basis counts must be positive".into()));
        }
        if e.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        check_eps_grid(&e.eps_grid)?;
        Ok(())
    }

    pub fn system(&self) -> Result<SlowFastSystem> {
        self.system.to_system()
    }

    pub fn cost(&self) -> Result<QuadraticCost> {
        self.cost.to_cost()
    }

    /// Configured `x0`, or slow components 1 and fast components 0.
    pub fn x0(&self, sys: &SlowFastSystem) -> Result<Vec<f64>> {
        match &self.experiment.x0 {
            Some(x) if x.len() != sys.dim() => Err(Error::Config(format!(
                "x0 has {} entries, the system has {} states",
                x.len(),
                sys.dim()
            ))),
            Some(x) => Ok(x.clone()),
            None => {
                let mut x = vec![0.0; sys.dim()];
                x[..sys.slow_dim()].iter_mut().for_each(|v| *v = 1.0);
                Ok(x)
            }
        }
    }
}

/// Nonempty, positive, strictly decreasing.
pub fn check_eps_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("eps_grid is empty".into()));
    }
    if let Some(&bad) = grid.iter().find(|&&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::NonpositiveEps(bad));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("eps_grid must be strictly decreasing".into()));
    }
    Ok(())
}

/// Explicit Euler on the fast block needs `dt ≤ ε·10⁻²`.
pub fn check_step_for_eps(dt: f64, eps: f64) -> Result<()> {
    if dt > eps * MAX_DT_OVER_EPS * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "dt = {dt} is too large for eps = {eps}: need dt <= {}",
            eps * MAX_DT_OVER_EPS
        )));
    }
    Ok(())
}
