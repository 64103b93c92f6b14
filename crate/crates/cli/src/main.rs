use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use slowfast::config::{check_eps_grid, ExperimentConfig};
use slowfast::experiment::{
    reduced_config_text, run_converge, run_oracle_check, run_reduce, run_simulate, run_solve, run_validate,
    write_converge_csv, write_ensemble_csv, write_oracle_csv, write_solve_csv, write_validate_csv, Target,
};
use slowfast::Error;

/// Slow/fast LQ control: FBSDE solves, homogenization and oracle checks.
#[derive(Parser)]
#[command(name = "slowfast", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `experiment.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `experiment.eps_grid` (comma separated, decreasing).
    #[arg(long, global = true, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions; exit 2 if any hard check fails.
    Validate,
    /// Write a control-free ensemble at the first eps.
    Simulate,
    /// Solve for the value at x0.
    Solve {
        #[arg(long, value_enum, default_value = "full")]
        target: SolveTarget,
    },
    /// Write the homogenized system as reduced.toml.
    Reduce,
    /// Convergence study of the full value towards the reduced one.
    Converge,
    /// Regression vs Riccati vs Feynman-Kac on a linear benchmark.
    OracleCheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveTarget {
    Full,
    Reduced,
}

enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Validation("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.experiment.output_dir = out.clone();
    }
    if let Some(eps) = &cli.eps {
        check_eps_grid(eps)?;
        cfg.experiment.eps_grid = eps.clone();
    }
    Ok(cfg)
}

fn benchmark_name(path: &Path) -> String {
    path.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load(cli)?;
    let out = cfg.experiment.output_dir.clone();
    let first_eps = cfg.experiment.eps_grid[0];
    let say = |msg: String| {
        if !cli.quiet {
            println!("{msg}");
        }
    };
    match &cli.command {
        Command::Validate => {
            let report = run_validate(&cfg)?;
            write_validate_csv(&out, &report)?;
            for item in &report.items {
                let status = if item.passed { "ok" } else if item.hard { "FAIL" } else { "warn" };
                say(format!("{status:>4}  {:<18} {}", item.name, item.detail));
            }
            if !report.passed() {
                return Err(Failure::Validation("hard checks failed".into()));
            }
        }
        Command::Simulate => {
            let ens = run_simulate(&cfg, first_eps)?;
            write_ensemble_csv(&out, &ens)?;
            let exited = (0..ens.n_paths()).filter(|&p| ens.exited(p)).count();
            say(format!("{} paths, {} steps, {exited} exited", ens.n_paths(), ens.n_steps()));
        }
        Command::Solve { target } => {
            let target = match target {
                SolveTarget::Full => Target::Full { eps: first_eps },
                SolveTarget::Reduced => Target::Reduced,
            };
            let res = run_solve(&cfg, target, 0)?;
            write_solve_csv(&out, &res)?;
            say(format!(
                "{} V(0, x0) = {:.6}  (min rank {}, ridge at {} steps, {:.1}s)",
                target.label(),
                res.value,
                res.min_rank(),
                res.ridge_steps(),
                res.elapsed_s
            ));
        }
        Command::Reduce => {
            let red = run_reduce(&cfg)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let text = reduced_config_text(&cfg, &red)?;
            std::fs::write(out.join("reduced.toml"), text).map_err(Error::from)?;
            say(format!("Abar = {:?}\nCbar = {:?}", red.abar.as_slice(), red.cbar.as_slice()));
        }
        Command::Converge => {
            let report = run_converge(&cfg)?;
            write_converge_csv(&out, &report)?;
            say(format!("{:>10} {:>14} {:>14}", "eps", "mean E", "sd E"));
            for s in &report.summary {
                say(format!("{:>10.5} {:>14.6e} {:>14.6e}", s.eps, s.mean_error, s.std_error));
            }
            say(format!("slope {:.4}", report.slope));
        }
        Command::OracleCheck => {
            let name = benchmark_name(cli.config.as_deref().unwrap_or(Path::new("config")));
            let report = run_oracle_check(&cfg, first_eps, &name)?;
            write_oracle_csv(&out, &report)?;
            for r in &report.rows {
                say(format!("{:<12} {:>12.6} ± {:.2e}", r.oracle, r.value, r.error_bar));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
