//! `samspline` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use samspline::config::{ModelConfig, RmseScale};
use samspline::data::{load_stock, save_stock};
use samspline::fit::{build_id, fit_with, FitOptions, FitResult};
use samspline::simulate::{simulate, TruthSpec};
use samspline::validation::{run_validation, Mode, ValidationOptions};
use samspline::{Error, Result};

mod compare;

#[derive(Parser, Debug)]
#[command(name = "samspline", version = env!("CARGO_PKG_VERSION"), about = "State-space stock assessment with spline parameter blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one configuration to a stock.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Model configuration JSON; an empty object gives the default spline model.
        #[arg(long)]
        config: PathBuf,
        /// FitResult JSON; `params.csv` and `ssb.csv` are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Jittered restarts after a non-converged first attempt.
        #[arg(long, default_value_t = 0)]
        restarts: usize,
        /// Polynomial degree of `spline_bs` blocks, overriding the config.
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=3))]
        bs_degree: Option<u8>,
    },
    /// Cross- and forward-validate configurations against the first one.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        /// Name of the stock in the reports; defaults to the data directory name.
        #[arg(long)]
        stock: Option<String>,
        #[arg(long, value_enum)]
        rmse_scale: Option<ScaleArg>,
        /// Predict with the lognormal mean instead of the median.
        #[arg(long)]
        lognormal_mean: bool,
        /// Polynomial degree of `spline_bs` blocks in every configuration.
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=3))]
        bs_degree: Option<u8>,
    },
    /// Draw a synthetic stock from a truth file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge parameter curves and SSB series of several fits of one stock.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        fits: Vec<PathBuf>,
        /// Directory receiving `curves.csv` and `ssb.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Cv,
    Forward,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Raw,
    Log,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Fit { data, config, out, restarts, bs_degree } => cmd_fit(&data, &config, &out, restarts, bs_degree),
        Command::Validate { data, configs, mode, out, jobs, stock, rmse_scale, lognormal_mean, bs_degree } => {
            let mode = match mode {
                ModeArg::Cv => Mode::Cv,
                ModeArg::Forward => Mode::Forward,
                ModeArg::Both => Mode::Both,
            };
            let scale = rmse_scale.map(|s| match s {
                ScaleArg::Raw => RmseScale::Raw,
                ScaleArg::Log => RmseScale::Log,
            });
            cmd_validate(&data, &configs, mode, &out, jobs, stock, scale, lognormal_mean, bs_degree)
        }
        Command::Simulate { config, truth, seed, out } => cmd_simulate(&config, &truth, seed, &out),
        Command::Compare { fits, out } => compare::cmd_compare(&fits, &out).map(|_| Outcome::Done),
    }
}

fn load_config(path: &Path, bs_degree: Option<u8>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::load(path)?;
    if let Some(d) = bs_degree {
        cfg.bs_degree = d as usize;
    }
    Ok(cfg)
}

fn cmd_fit(data: &Path, config: &Path, out: &Path, restarts: usize, bs_degree: Option<u8>) -> Result<Outcome> {
    let stock = load_stock(data)?;
    let cfg = load_config(config, bs_degree)?;
    cfg.validate(&stock)?;
    let result = fit_with(&stock, &cfg, &FitOptions { restarts: Some(restarts), start: None })?;
    write_fit(&result, out)?;
    eprintln!(
        "{}: objective {:.6}, gradient norm {:.3e}, {}",
        result.model,
        result.objective,
        result.convergence.gradient_norm,
        if result.converged { "converged" } else { "NOT converged" }
    );
    Ok(if result.converged { Outcome::Done } else { Outcome::NotConverged })
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

fn write_fit(result: &FitResult, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    result.write_json(out)?;
    result.write_params_csv(sibling(out, "params.csv"))?;
    compare::write_ssb(&[(result.model.clone(), result)], &sibling(out, "ssb.csv"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_validate(
    data: &Path,
    configs: &[PathBuf],
    mode: Mode,
    out: &Path,
    jobs: Option<usize>,
    stock: Option<String>,
    rmse_scale: Option<RmseScale>,
    lognormal_mean: bool,
    bs_degree: Option<u8>,
) -> Result<Outcome> {
    if configs.len() < 2 {
        return Err(Error::ConfigInvalid("validation compares at least 2 configurations".into()));
    }
    let stock_data = load_stock(data)?;
    let mut models = Vec::new();
    for path in configs {
        let mut cfg = load_config(path, bs_degree)?;
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        models.push(cfg);
    }
    let baseline = &models[0];
    let options = ValidationOptions {
        mode,
        jobs,
        rmse_scale: rmse_scale.unwrap_or(baseline.rmse_scale),
        lognormal_mean: lognormal_mean || baseline.lognormal_mean,
    };
    let name = stock.unwrap_or_else(|| {
        data.file_name().map_or_else(|| "stock".into(), |s| s.to_string_lossy().into_owned())
    });
    let report = run_validation(&name, &stock_data, &models, &options)?;
    report.write(out)?;
    for (kind, rows) in [("cv", &report.convergence_cv), ("forward", &report.convergence_forward)] {
        for r in rows {
            eprintln!("{kind:8} {:20} {}/{}", r.model, r.converged, r.total);
        }
    }
    let all_converged = report.runs.iter().all(|r| r.converged);
    Ok(if all_converged { Outcome::Done } else { Outcome::NotConverged })
}

fn cmd_simulate(config: &Path, truth: &Path, seed: u64, out: &Path) -> Result<Outcome> {
    let cfg = ModelConfig::load(config)?;
    if !truth.exists() {
        return Err(Error::MissingFile(truth.to_path_buf()));
    }
    let spec: TruthSpec = serde_json::from_str(&std::fs::read_to_string(truth)?)
        .map_err(|e| Error::ConfigInvalid(format!("truth file {}: {e}", truth.display())))?;
    let (data, truth) = simulate(&cfg, &spec, seed)?;
    save_stock(&data, out)?;
    #[derive(serde::Serialize)]
    struct TruthFile<'a> {
        build: String,
        #[serde(flatten)]
        truth: &'a samspline::simulate::Truth,
    }
    let text = serde_json::to_string_pretty(&TruthFile { build: build_id(), truth: &truth })?;
    std::fs::write(out.join("truth.json"), text)?;
    Ok(Outcome::Done)
}
