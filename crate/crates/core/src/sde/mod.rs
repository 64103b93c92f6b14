//! Euler–Maruyama simulation of the control-free forward SDE.
//!
//! Paths are stopped on the time grid once the slow coordinates leave the
//! domain and stay frozen at the exit state afterwards.

mod noise;

use std::io::Write;

use rayon::prelude::*;

pub use noise::{derive_seed, sample_increments};
pub(crate) use noise::PathNoise;

use crate::error::{Error, Result};
use crate::model::{mat_vec, ControlSystem, Domain};

/// Uniform time grid `t_n = n·dt`, `n = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt > 0.0 && horizon > 0.0 && dt.is_finite() && horizon.is_finite()) {
            return Err(Error::BadGrid { dt, horizon });
        }
        let ratio = horizon / dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * n.max(1.0) || n < 1.0 {
            return Err(Error::BadGrid { dt, horizon });
        }
        Ok(Self {
            dt,
            n_steps: n as usize,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
    pub fn time(&self, step: usize) -> f64 {
        self.dt * step as f64
    }
}

pub(crate) fn check_initial_state(sys: &ControlSystem, domain: &Domain, x0: &[f64]) -> Result<()> {
    if x0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: sys.dim().to_string(),
            got: x0.len().to_string(),
        });
    }
    if !domain.contains(&x0[..sys.slow_dim()]) {
        return Err(Error::InitialStateOutsideDomain);
    }
    Ok(())
}

/// Runs one Euler path, calling `visit(step, state)` for every step up to and
/// including the exit step. `extra_drift(step, state, out)` may add to the
/// drift (control). Returns the exit index, or `None` if the path never left.
pub(crate) fn run_path(
    sys: &ControlSystem,
    domain: &Domain,
    x0: &[f64],
    grid: &TimeGrid,
    seed: u64,
    path: u64,
    mut extra_drift: impl FnMut(usize, &[f64], &mut [f64]),
    mut visit: impl FnMut(usize, &[f64]),
) -> Option<usize> {
    let d = sys.dim();
    let m = sys.noise_dim();
    let ns = sys.slow_dim();
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut noise = PathNoise::new(seed, path, m);
    let mut xi = vec![0.0; m];
    let mut x = x0.to_vec();
    let mut drift = vec![0.0; d];
    let mut diff = vec![0.0; d];
    visit(0, &x);
    for step in 0..grid.n_steps() {
        mat_vec(sys.drift(), &x, &mut drift);
        extra_drift(step, &x, &mut drift);
        noise.next_into(&mut xi);
        mat_vec(sys.noise(), &xi, &mut diff);
        for i in 0..d {
            x[i] += dt * drift[i] + sq * diff[i];
        }
        visit(step + 1, &x);
        if !domain.contains(&x[..ns]) {
            return Some(step + 1);
        }
    }
    None
}

/// Seeded ensemble of control-free Euler paths.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    noise_dim: usize,
    n_paths: usize,
    seed: u64,
    /// Path-major: `states[(path * (N+1) + step) * dim + i]`.
    states: Vec<f64>,
    exit_index: Vec<usize>,
    exited: Vec<bool>,
}

/// Simulates `n_paths` control-free paths from `x0`.
///
/// Path `i` depends only on `(seed, i)`, so ensembles are bit-identical
/// across runs and thread counts.
pub fn simulate(
    sys: &ControlSystem,
    domain: &Domain,
    x0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_initial_state(sys, domain, x0)?;
    if n_paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    let d = sys.dim();
    let n1 = grid.n_steps() + 1;
    let mut states = vec![0.0; n_paths * n1 * d];
    let exits: Vec<Option<usize>> = states
        .par_chunks_mut(n1 * d)
        .enumerate()
        .map(|(i, slab)| {
            let exit = run_path(sys, domain, x0, grid, seed, i as u64, |_, _, _| {}, |s, x| {
                slab[s * d..(s + 1) * d].copy_from_slice(x)
            });
            if let Some(e) = exit {
                let (head, tail) = slab.split_at_mut((e + 1) * d);
                let frozen = &head[e * d..];
                for chunk in tail.chunks_mut(d) {
                    chunk.copy_from_slice(frozen);
                }
            }
            exit
        })
        .collect();
    Ok(PathEnsemble {
        grid: *grid,
        dim: d,
        noise_dim: sys.noise_dim(),
        n_paths,
        seed,
        states,
        exit_index: exits.iter().map(|e| e.unwrap_or(grid.n_steps())).collect(),
        exited: exits.iter().map(Option::is_some).collect(),
    })
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.n_steps() + 1) + step) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// First grid index at which the path was outside the domain, or `N`.
    pub fn exit_index(&self, path: usize) -> usize {
        self.exit_index[path]
    }

    pub fn exited(&self, path: usize) -> bool {
        self.exited[path]
    }

    /// Brownian increment `√dt·ξ` used between `step` and `step + 1`,
    /// regenerated from the seed.
    pub fn increment(&self, path: usize, step: usize) -> Vec<f64> {
        let sq = self.dt().sqrt();
        sample_increments(self.seed, path as u64, step as u64, self.noise_dim)
            .into_iter()
            .map(|v| v * sq)
            .collect()
    }

    /// Ensemble mean of the state at `step`.
    pub fn mean(&self, step: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for p in 0..self.n_paths {
            for (a, v) in acc.iter_mut().zip(self.state(p, step)) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / self.n_paths as f64).collect()
    }

    /// Columnar CSV: `path,step,time,x0..x{d-1},exit_flag`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "path,step,time")?;
        for i in 0..self.dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w, ",exit_flag")?;
        for p in 0..self.n_paths {
            for s in 0..=self.n_steps() {
                write!(w, "{p},{s},{}", self.grid.time(s))?;
                for v in self.state(p, s) {
                    write!(w, ",{v}")?;
                }
                let flag = self.exited[p] && s >= self.exit_index[p];
                writeln!(w, ",{}", flag as u8)?;
            }
        }
        Ok(())
    }
}
