//! Configured runs behind the command-line subcommands.
//!
//! Each run is a pure function of the configuration and its seed. Seeds for
//! the regression paths and for the basis paths are derived per repetition,
//! and the full and reduced solves of one repetition share them, so their
//! difference is not swamped by independent sampling noise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{check_step_for_eps, ExperimentConfig, NumericsSection};
use crate::error::{Error, Result};
use crate::fbsde::{backward_solve, build_basis, mean_and_error, ValueField};
use crate::model::{
    assemble, validate_condition_lq, ConditionReport, ControlSystem, Driver, LqDriver, QuadraticCost,
    SlowFastSystem,
};
use crate::oracles::{duality_applies, feynman_kac_value, riccati_for};
use crate::reduction::{reduce, reduced_control_system, ReducedSystem};
use crate::sde::{derive_seed, simulate, PathEnsemble, TimeGrid};

/// Which value function a solve computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Full { eps: f64 },
    Reduced,
}

impl Target {
    pub fn label(&self) -> &'static str {
        match self {
            Target::Full { .. } => "full",
            Target::Reduced => "reduced",
        }
    }
    pub fn eps(&self) -> Option<f64> {
        match self {
            Target::Full { eps } => Some(*eps),
            Target::Reduced => None,
        }
    }
}

/// Seeds of one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub paths: u64,
    pub basis: u64,
}

impl RunSeeds {
    pub fn for_repetition(seed: u64, repetition: usize) -> Self {
        Self {
            paths: derive_seed(seed, 2 * repetition as u64),
            basis: derive_seed(seed, 2 * repetition as u64 + 1),
        }
    }
}

/// Result of one backward solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub target: Target,
    pub seeds: RunSeeds,
    pub x0: Vec<f64>,
    /// `Y(x0; 0)`.
    pub value: f64,
    pub field: ValueField,
    pub paths: usize,
    pub basis: usize,
    pub elapsed_s: f64,
}

impl SolveOutcome {
    pub fn min_rank(&self) -> usize {
        self.field.rank_report().iter().copied().min().unwrap_or(0)
    }
    /// Steps where the ridge fallback was used.
    pub fn ridge_steps(&self) -> usize {
        self.field.ridge_used().iter().filter(|&&r| r > 0.0).count()
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_system(
    target: Target,
    sys: &ControlSystem,
    driver: &dyn Driver,
    cost: &QuadraticCost,
    numerics: &NumericsSection,
    basis_size: usize,
    x0: &[f64],
    seeds: RunSeeds,
) -> Result<SolveOutcome> {
    let start = Instant::now();
    let grid = TimeGrid::new(numerics.dt, cost.horizon())?;
    let ensemble = simulate(sys, cost.domain(), x0, &grid, numerics.paths, seeds.paths)?;
    let basis = build_basis(sys, cost.domain(), x0, &grid, basis_size, numerics.delta, seeds.basis)?;
    let terminal = |x: &[f64]| cost.terminal_cost_q1(x);
    let field = backward_solve(&ensemble, &basis, driver, &terminal, sys.noise())?;
    Ok(SolveOutcome {
        target,
        seeds,
        x0: x0.to_vec(),
        value: field.value_at_start(x0),
        field,
        paths: numerics.paths,
        basis: basis_size,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Value of the ε-scaled system at the full state `x0`.
pub fn solve_full(
    sys: &SlowFastSystem,
    cost: &QuadraticCost,
    numerics: &NumericsSection,
    x0: &[f64],
    eps: f64,
    seeds: RunSeeds,
) -> Result<SolveOutcome> {
    if sys.fast_dim() > 0 {
        check_step_for_eps(numerics.dt, eps)?;
    }
    let asys = assemble(sys, eps)?;
    let driver = LqDriver::new(&asys, cost)?;
    solve_system(Target::Full { eps }, &asys, &driver, cost, numerics, numerics.basis_full, x0, seeds)
}

/// Value of the reduced system at the slow state `x0_slow`.
pub fn solve_reduced(
    red: &ReducedSystem,
    cost: &QuadraticCost,
    numerics: &NumericsSection,
    x0_slow: &[f64],
    seeds: RunSeeds,
) -> Result<SolveOutcome> {
    let sys = reduced_control_system(red)?;
    let driver = red.driver();
    solve_system(Target::Reduced, &sys, &driver, cost, numerics, numerics.basis_reduced, x0_slow, seeds)
}

/// Runs one configured solve for the given repetition's seeds.
pub fn run_solve(cfg: &ExperimentConfig, target: Target, repetition: usize) -> Result<SolveOutcome> {
    let sys = cfg.system()?;
    let cost = cfg.cost()?;
    let x0 = cfg.x0(&sys)?;
    let seeds = RunSeeds::for_repetition(cfg.experiment.seed, repetition);
    match target {
        Target::Full { eps } => solve_full(&sys, &cost, &cfg.numerics, &x0, eps, seeds),
        Target::Reduced => {
            let red = reduce(&sys, &cost)?;
            solve_reduced(&red, &cost, &cfg.numerics, &x0[..sys.slow_dim()], seeds)
        }
    }
}

/// Standing assumptions plus the configuration-level checks.
pub fn run_validate(cfg: &ExperimentConfig) -> Result<ConditionReport> {
    let sys = cfg.system()?;
    let cost = cfg.cost()?;
    let mut report = validate_condition_lq(&sys, &cost);
    let mut push = |name, passed, detail: String| {
        report.items.push(crate::model::CheckItem {
            name,
            passed,
            hard: true,
            detail,
        })
    };
    if sys.fast_dim() > 0 {
        let worst = cfg.experiment.eps_grid.iter().cloned().fold(f64::INFINITY, f64::min);
        let ok = check_step_for_eps(cfg.numerics.dt, worst).is_ok();
        push("step_size", ok, format!("dt = {} against smallest eps = {worst}", cfg.numerics.dt));
    }
    match cfg.x0(&sys) {
        Ok(x0) => {
            let inside = cost.domain().contains(&x0[..sys.slow_dim()]);
            push("x0_inside", inside, format!("x0 = {x0:?}"));
        }
        Err(e) => push("x0_inside", false, e.to_string()),
    }
    Ok(report)
}

/// Control-free ensemble of the ε-scaled system.
pub fn run_simulate(cfg: &ExperimentConfig, eps: f64) -> Result<PathEnsemble> {
    let sys = cfg.system()?;
    let cost = cfg.cost()?;
    let x0 = cfg.x0(&sys)?;
    if sys.fast_dim() > 0 {
        check_step_for_eps(cfg.numerics.dt, eps)?;
    }
    let asys = assemble(&sys, eps)?;
    let grid = TimeGrid::new(cfg.numerics.dt, cost.horizon())?;
    let seeds = RunSeeds::for_repetition(cfg.experiment.seed, 0);
    simulate(&asys, cost.domain(), &x0, &grid, cfg.numerics.paths, seeds.paths)
}

/// The reduced system of the configuration.
pub fn run_reduce(cfg: &ExperimentConfig) -> Result<ReducedSystem> {
    reduce(&cfg.system()?, &cfg.cost()?)
}

/// Reduced system followed by the configuration's cost and run settings, so
/// the file can be fed back as a configuration of a slow-only system.
pub fn reduced_config_text(cfg: &ExperimentConfig, red: &ReducedSystem) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Rest<'a> {
        cost: &'a crate::config::CostSection,
        numerics: &'a NumericsSection,
        experiment: crate::config::ExperimentSection,
    }
    let mut experiment = cfg.experiment.clone();
    if let Some(x0) = experiment.x0.as_mut() {
        x0.truncate(red.slow_dim());
    }
    let rest = toml::to_string(&Rest {
        cost: &cfg.cost,
        numerics: &cfg.numerics,
        experiment,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("{}\n{rest}", red.to_toml()?))
}

/// `E(ε) = |V^ε(0, x0) − V̄(0, x0₁)|` for one repetition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergeRun {
    pub eps: f64,
    pub repetition: usize,
    pub v_full: f64,
    pub v_reduced: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergeSummary {
    pub eps: f64,
    pub mean_error: f64,
    /// Sample standard deviation over repetitions.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeReport {
    pub runs: Vec<ConvergeRun>,
    pub summary: Vec<ConvergeSummary>,
    /// Least-squares fit of `ln mean E` against `ln ε`.
    pub slope: f64,
    pub intercept: f64,
    pub x0: Vec<f64>,
    pub seed: u64,
}

/// Least-squares line through `(ln x, ln y)`.
pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("a log-log fit needs at least two points".into()));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::Config("a log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("a log-log fit needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Convergence study over `eps_grid` with `repetitions` seeds.
///
/// The reduced problem is solved once per repetition. Repetitions run
/// concurrently; the ε loop inside a repetition is sequential to bound memory.
pub fn run_converge(cfg: &ExperimentConfig) -> Result<ConvergeReport> {
    let grid = &cfg.experiment.eps_grid;
    let reps = cfg.experiment.repetitions;
    if grid.len() < 3 || reps < 2 {
        return Err(Error::Config(format!(
            "convergence study needs at least 3 eps values and 2 repetitions (got {} and {reps})",
            grid.len()
        )));
    }
    let sys = cfg.system()?;
    let cost = cfg.cost()?;
    let x0 = cfg.x0(&sys)?;
    let red = reduce(&sys, &cost)?;
    let per_rep: Vec<Result<Vec<ConvergeRun>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seeds = RunSeeds::for_repetition(cfg.experiment.seed, rep);
            let v_reduced = solve_reduced(&red, &cost, &cfg.numerics, &x0[..sys.slow_dim()], seeds)?.value;
            grid.iter()
                .map(|&eps| {
                    let v_full = solve_full(&sys, &cost, &cfg.numerics, &x0, eps, seeds)?.value;
                    Ok(ConvergeRun {
                        eps,
                        repetition: rep,
                        v_full,
                        v_reduced,
                        error: (v_full - v_reduced).abs(),
                    })
                })
                .collect()
        })
        .collect();
    let mut runs = Vec::with_capacity(reps * grid.len());
    for r in per_rep {
        runs.extend(r?);
    }
    let summary: Vec<ConvergeSummary> = grid
        .iter()
        .map(|&eps| {
            let errs: Vec<f64> = runs.iter().filter(|r| r.eps == eps).map(|r| r.error).collect();
            let est = mean_and_error(&errs);
            ConvergeSummary {
                eps,
                mean_error: est.mean,
                std_error: est.std_err * (errs.len() as f64).sqrt(),
            }
        })
        .collect();
    let eps: Vec<f64> = summary.iter().map(|s| s.eps).collect();
    let means: Vec<f64> = summary.iter().map(|s| s.mean_error).collect();
    let (slope, intercept) = fit_loglog(&eps, &means)?;
    Ok(ConvergeReport {
        runs,
        summary,
        slope,
        intercept,
        x0,
        seed: cfg.experiment.seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub oracle: &'static str,
    pub benchmark: String,
    pub value: f64,
    pub error_bar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub pair: &'static str,
    pub difference: f64,
    pub error_bar: f64,
    /// `|difference| / |reference|`, the reference being the second entry of the pair.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
    pub discrepancies: Vec<Discrepancy>,
    /// Regression values, one per seed.
    pub fbsde_values: Vec<f64>,
    pub riccati: f64,
}

impl OracleReport {
    /// Mean over seeds of `|V_fbsde − V_riccati| / |V_riccati|`.
    pub fn fbsde_mean_relative_error(&self) -> f64 {
        let n = self.fbsde_values.len() as f64;
        self.fbsde_values
            .iter()
            .map(|v| (v - self.riccati).abs() / self.riccati.abs())
            .sum::<f64>()
            / n
    }
}

/// Regression, Riccati and Feynman–Kac values for a linear benchmark.
///
/// Requires `N = 0` and `B = C` on the ε-scaled system.
pub fn run_oracle_check(cfg: &ExperimentConfig, eps: f64, benchmark: &str) -> Result<OracleReport> {
    let sys = cfg.system()?;
    let cost = cfg.cost()?;
    let x0 = cfg.x0(&sys)?;
    if sys.fast_dim() > 0 {
        check_step_for_eps(cfg.numerics.dt, eps)?;
    }
    let asys = assemble(&sys, eps)?;
    if !duality_applies(&asys) {
        return Err(Error::DualityPremise);
    }
    let riccati = riccati_for(&asys, &cost, cfg.numerics.riccati_dt)?.value_at_start(&x0);

    let fbsde_values = (0..cfg.numerics.oracle_seeds)
        .map(|rep| {
            let seeds = RunSeeds::for_repetition(cfg.experiment.seed, rep);
            solve_full(&sys, &cost, &cfg.numerics, &x0, eps, seeds).map(|o| o.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    let fbsde = mean_and_error(&fbsde_values);

    let grid = TimeGrid::new(cfg.numerics.dt, cost.horizon())?;
    let fk_seed = derive_seed(cfg.experiment.seed, u64::MAX);
    let fk = feynman_kac_value(&asys, &cost, &x0, &grid, cfg.numerics.oracle_paths, fk_seed)?;

    let row = |oracle, value, error_bar| OracleRow {
        oracle,
        benchmark: benchmark.to_string(),
        value,
        error_bar,
    };
    let rows = vec![
        row("fbsde", fbsde.mean, fbsde.std_err),
        row("riccati", riccati, 0.0),
        row("feynman_kac", fk.mean, fk.std_err),
    ];
    let rel = |d: f64, r: f64| if r != 0.0 { d.abs() / r.abs() } else if d == 0.0 { 0.0 } else { f64::INFINITY };
    let discrepancies = vec![
        Discrepancy {
            pair: "fbsde-riccati",
            difference: fbsde.mean - riccati,
            error_bar: fbsde.std_err,
            relative: rel(fbsde.mean - riccati, riccati),
        },
        Discrepancy {
            pair: "feynman_kac-riccati",
            difference: fk.mean - riccati,
            error_bar: fk.std_err,
            relative: rel(fk.mean - riccati, riccati),
        },
        Discrepancy {
            pair: "fbsde-feynman_kac",
            difference: fbsde.mean - fk.mean,
            error_bar: fbsde.std_err.hypot(fk.std_err),
            relative: rel(fbsde.mean - fk.mean, fk.mean),
        },
    ];
    Ok(OracleReport {
        rows,
        discrepancies,
        fbsde_values,
        riccati,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// `validate.csv`: `check,passed,hard,detail`.
pub fn write_validate_csv(dir: &Path, report: &ConditionReport) -> Result<()> {
    let mut w = create(dir, "validate.csv")?;
    writeln!(w, "check,passed,hard,detail")?;
    for item in &report.items {
        let detail = item.detail.replace('"', "'");
        writeln!(w, "{},{},{},\"{detail}\"", item.name, item.passed, item.hard)?;
    }
    w.flush()?;
    Ok(())
}

/// `solve.csv` and `value_field.csv`.
pub fn write_solve_csv(dir: &Path, out: &SolveOutcome) -> Result<()> {
    let mut w = create(dir, "solve.csv")?;
    writeln!(w, "target,eps,path_seed,basis_seed,paths,basis,value,min_rank,ridge_steps,elapsed_s")?;
    let eps = out.target.eps().map_or(String::new(), |e| e.to_string());
    writeln!(
        w,
        "{},{eps},{},{},{},{},{},{},{},{}",
        out.target.label(),
        out.seeds.paths,
        out.seeds.basis,
        out.paths,
        out.basis,
        out.value,
        out.min_rank(),
        out.ridge_steps(),
        out.elapsed_s
    )?;
    w.flush()?;
    let mut f = create(dir, "value_field.csv")?;
    out.field.write_csv(&mut f)?;
    f.flush()?;
    Ok(())
}

/// `ensemble.csv`.
pub fn write_ensemble_csv(dir: &Path, ens: &PathEnsemble) -> Result<()> {
    let mut w = create(dir, "ensemble.csv")?;
    ens.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// `converge_runs.csv`, `converge_summary.csv`, `converge_fit.csv`,
/// `converge_meta.csv` and the two-column `convergence_loglog.dat`.
pub fn write_converge_csv(dir: &Path, report: &ConvergeReport) -> Result<()> {
    let mut w = create(dir, "converge_runs.csv")?;
    writeln!(w, "eps,repetition,v_full,v_reduced,error")?;
    for r in &report.runs {
        writeln!(w, "{},{},{},{},{}", r.eps, r.repetition, r.v_full, r.v_reduced, r.error)?;
    }
    w.flush()?;
    let mut w = create(dir, "converge_summary.csv")?;
    writeln!(w, "eps,mean_error,std_error")?;
    for s in &report.summary {
        writeln!(w, "{},{},{}", s.eps, s.mean_error, s.std_error)?;
    }
    w.flush()?;
    let mut w = create(dir, "converge_fit.csv")?;
    writeln!(w, "slope,intercept")?;
    writeln!(w, "{},{}", report.slope, report.intercept)?;
    w.flush()?;
    let mut w = create(dir, "converge_meta.csv")?;
    writeln!(w, "seed,repetitions,x0")?;
    let x0: Vec<String> = report.x0.iter().map(|v| v.to_string()).collect();
    let reps = report.runs.iter().map(|r| r.repetition + 1).max().unwrap_or(0);
    writeln!(w, "{},{reps},{}", report.seed, x0.join(" "))?;
    w.flush()?;
    let mut w = create(dir, "convergence_loglog.dat")?;
    writeln!(w, "# ln_eps ln_mean_error")?;
    for s in &report.summary {
        writeln!(w, "{} {}", s.eps.ln(), s.mean_error.ln())?;
    }
    w.flush()?;
    Ok(())
}

/// `oracles.csv` and `discrepancies.csv`.
pub fn write_oracle_csv(dir: &Path, report: &OracleReport) -> Result<()> {
    let mut w = create(dir, "oracles.csv")?;
    writeln!(w, "oracle,benchmark,value,error_bar")?;
    for r in &report.rows {
        writeln!(w, "{},{},{},{}", r.oracle, r.benchmark, r.value, r.error_bar)?;
    }
    w.flush()?;
    let mut w = create(dir, "discrepancies.csv")?;
    writeln!(w, "pair,difference,error_bar,relative")?;
    for d in &report.discrepancies {
        writeln!(w, "{},{},{},{}", d.pair, d.difference, d.error_bar, d.relative)?;
    }
    w.flush()?;
    Ok(())
}
