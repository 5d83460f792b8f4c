//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 configuration error,
//! 3 runtime failure, 4 bound violation found by `verify-bounds`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::KpcError;
use crate::ocp::RobustMode;
use crate::pipeline::{
    fit_report, generate_all, load_bank, load_datasets, load_log, save_bank, save_datasets, save_log, save_log_csv,
    train, write_atomic, Controller, RunOptions, TrajectoryLog,
};
use crate::plot::render_svg;
use crate::verify::{verify_bounds, BoundCheckOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "kpc", version, about = "Kernel predictive control experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample training data from the configured plant.
    GenData(CommonArgs),
    /// Fit the predictor bank and report per-model statistics.
    Train(TrainArgs),
    /// Run the closed loop from every configured initial condition.
    Run(RunArgs),
    /// Monte Carlo check of the error bound on a synthetic truth of known norm.
    VerifyBounds(VerifyArgs),
    /// Render trajectory logs to SVG and CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset directory; defaults to `<out>/data`, generated when missing.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Robust,
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub srs: Option<Switch>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Bank manifest or directory; defaults to `<out>/bank`, trained when missing.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Only the output directory is read from it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of noisy training samples.
    #[arg(long, default_value_t = 40)]
    pub d: usize,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Logs to render; defaults to every log in `<out>/runs`.
    #[arg(long = "log")]
    pub logs: Vec<PathBuf>,
}

/// Failure of a subcommand together with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

impl From<KpcError> for CliError {
    fn from(e: KpcError) -> Self {
        match e {
            KpcError::Config(_) => CliError::config(e),
            other => CliError::runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: &Command) -> CliResult<i32> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::VerifyBounds(a) => verify_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn load_config(a: &CommonArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&a.config).map_err(CliError::config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn gen_data(a: &CommonArgs) -> CliResult<i32> {
    let cfg = load_config(a)?;
    let data = generate_all(&cfg, cfg.seed)?;
    let dir = out_dir(&cfg).join("data");
    let paths = save_datasets(&data, &dir)?;
    for (s, p) in data.iter().zip(&paths) {
        println!("step {}: {} samples -> {}", s.step, s.len(), p.display());
    }
    Ok(EXIT_OK)
}

fn datasets_for(cfg: &ExperimentConfig, dir: &Path) -> CliResult<Vec<crate::pipeline::StepData>> {
    if dir.join("step_1.json").exists() {
        Ok(load_datasets(dir, cfg.data.horizon)?)
    } else {
        log::info!("no datasets in {}, generating them", dir.display());
        let data = generate_all(cfg, cfg.seed)?;
        save_datasets(&data, dir)?;
        Ok(data)
    }
}

fn train_cmd(a: &TrainArgs) -> CliResult<i32> {
    let cfg = load_config(&a.common)?;
    let out = out_dir(&cfg);
    let data_dir = a.data.clone().unwrap_or_else(|| out.join("data"));
    let data = datasets_for(&cfg, &data_dir)?;
    let bank = train(&cfg, &data)?;
    let manifest = save_bank(&bank, &out.join("bank"))?;
    let report = fit_report(&bank);
    write_json(&out.join("fit_report.json"), &report)?;
    println!("bank -> {}", manifest.display());
    println!("step dim samples      norm         delta        gamma    condition");
    for e in &report {
        println!(
            "{:>4} {:>3} {:>7} {:>9.4e} {:>12.4e} {:>12.4e} {:>12.3e}",
            e.step, e.dim, e.samples, e.rkhs_norm, e.delta, e.gamma, e.condition
        );
    }
    Ok(EXIT_OK)
}

/// Summary line of one closed-loop run as written to `summary.json`.
#[derive(Debug, Serialize)]
struct RunEntry {
    initial_state: Vec<f64>,
    log: String,
    #[serde(flatten)]
    summary: crate::pipeline::RunSummary,
    steps_to_tolerance_0_05: Option<usize>,
}

fn run_cmd(a: &RunArgs) -> CliResult<i32> {
    let cfg = load_config(&a.common)?;
    let out = out_dir(&cfg);
    let mut opts = RunOptions::from_config(&cfg);
    if let Some(m) = a.mode {
        opts.mode = match m {
            ModeArg::Robust => RobustMode::Robust,
            ModeArg::Nominal => RobustMode::Nominal,
        };
    }
    if let Some(s) = a.srs {
        opts.srs = s == Switch::On;
    }
    if let Some(n) = a.steps {
        opts.steps = n;
    }
    let bank_path = a.bank.clone().unwrap_or_else(|| out.join("bank"));
    let bank = if bank_path.join("bank.json").exists() || bank_path.is_file() {
        load_bank(&bank_path)?
    } else {
        log::info!("no bank at {}, training one", bank_path.display());
        let data = datasets_for(&cfg, &out.join("data"))?;
        let bank = train(&cfg, &data)?;
        save_bank(&bank, &out.join("bank"))?;
        bank
    };
    let ctl = Controller::new(&cfg, Arc::new(bank), opts.mode, opts.srs)?;
    let tag = format!(
        "{}_{}",
        match opts.mode {
            RobustMode::Robust => "robust",
            RobustMode::Nominal => "nominal",
        },
        if opts.srs { "srs" } else { "plain" }
    );
    let runs = out.join("runs");
    let mut entries = Vec::new();
    for (i, x0) in cfg.control.initial_conditions.iter().enumerate() {
        let log = ctl.run(x0, &opts)?;
        let json = runs.join(format!("{tag}_ic{i}.json"));
        save_log(&log, &json)?;
        save_log_csv(&log, &runs.join(format!("{tag}_ic{i}.csv")))?;
        let s = log.summary();
        println!(
            "{tag} from {x0:?}: {} steps, {} violations, {} infeasible, {} fallback, final distance {:.3e}, {} solver iterations, {:.2}s{}",
            s.steps,
            s.violations,
            s.infeasible_steps,
            s.fallback_steps,
            s.final_distance,
            s.solver_iterations,
            s.wall_time_s,
            log.aborted.as_deref().map(|r| format!(", aborted: {r}")).unwrap_or_default()
        );
        entries.push(RunEntry {
            initial_state: x0.clone(),
            log: json.to_string_lossy().into_owned(),
            steps_to_tolerance_0_05: log.steps_to_reach(0.05),
            summary: s,
        });
    }
    let total: usize = entries.iter().map(|e| e.summary.violations).sum();
    println!("total violations: {total}");
    write_json(&runs.join(format!("{tag}_summary.json")), &entries)?;
    if entries.iter().any(|e| e.summary.aborted) {
        return Err(CliError::runtime("a closed-loop run stopped early"));
    }
    Ok(EXIT_OK)
}

fn verify_cmd(a: &VerifyArgs) -> CliResult<i32> {
    let out = match (&a.out, &a.config) {
        (Some(o), _) => Some(o.clone()),
        (None, Some(c)) => Some(out_dir(&ExperimentConfig::load(c).map_err(CliError::config)?)),
        (None, None) => None,
    };
    let opts = BoundCheckOptions {
        dim: a.dim,
        samples: a.d,
        trials: a.trials,
        noise_bound: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::config("noise bound must be finite and nonnegative"));
    }
    let report = verify_bounds(&opts)?;
    println!(
        "{} violations in {} trials (Γ {:.4}, max β {:.4e}, max error {:.4e}, min margin {:.4e})",
        report.violations, report.trials, report.gamma, report.max_beta, report.max_abs_error, report.min_margin
    );
    if let Some(o) = out {
        write_json(&o.join("verify_bounds.json"), &report)?;
    }
    Ok(if report.violations == 0 { EXIT_OK } else { EXIT_VERIFICATION })
}

fn plot_cmd(a: &PlotArgs) -> CliResult<i32> {
    let out = match (&a.out, &a.config) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => out_dir(&ExperimentConfig::load(c).map_err(CliError::config)?),
        (None, None) => PathBuf::from("out"),
    };
    let mut logs = a.logs.clone();
    if logs.is_empty() {
        let runs = out.join("runs");
        let entries = std::fs::read_dir(&runs).map_err(|e| CliError::runtime(format!("{}: {e}", runs.display())))?;
        for e in entries {
            let p = e.map_err(CliError::runtime)?.path();
            let is_log = p.extension().is_some_and(|x| x == "json")
                && !p.file_name().is_some_and(|n| n.to_string_lossy().ends_with("_summary.json"));
            if is_log {
                logs.push(p);
            }
        }
        logs.sort();
    }
    if logs.is_empty() {
        return Err(CliError::runtime("no trajectory logs to plot"));
    }
    let plots = out.join("plots");
    for p in &logs {
        let log: TrajectoryLog = load_log(p)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "log".into());
        let svg = plots.join(format!("{stem}.svg"));
        write_atomic(&svg, render_svg(&log).as_bytes())?;
        write_atomic(&plots.join(format!("{stem}.csv")), log.to_csv()?.as_bytes())?;
        println!("{} -> {}", p.display(), svg.display());
    }
    Ok(EXIT_OK)
}
