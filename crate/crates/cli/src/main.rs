use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use plis::controllers::ControllerKind;
use plis::experiment::{plan_for, run_experiment, ExperimentConfig, AP_DELAY_ORDER};
use plis::koopman::{dmd_fit, Snapshots, DEFAULT_ORDER};
use plis::plis::ErrorBudget;
use plis::report::{emit_reports, prepare_output_dir, read_trace_csv};
use plis::SimError;

const EXIT_INVALID: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "plis", version, about = "Closed-loop simulation with error-bounded invariant steps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cohort seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Timed repetitions per run.
    #[arg(long)]
    reps: Option<usize>,
    /// Simulated horizon in minutes.
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Pid,
    Mpc,
    BayesianLqg,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Pid => ControllerKind::Pid,
            ControllerArg::Mpc => ControllerKind::Mpc,
            ControllerArg::BayesianLqg => ControllerKind::BayesianLqg,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment matrix and write every report.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Suppress per-run progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Compute and print the invariant-step plan of one patient.
    Plan {
        config: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        psi: f64,
        #[arg(long, default_value_t = 0)]
        patient: usize,
        #[arg(long, value_enum, default_value = "mpc")]
        controller: ControllerArg,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit a Koopman surrogate to the trace CSVs in a directory.
    FitKoopman {
        traces: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ORDER)]
        order: usize,
        /// Sampling step of the traces (minutes).
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        /// Where to write the fitted model.
        #[arg(long, default_value = "koopman.txt")]
        out: PathBuf,
    },
    /// Check a configuration file without running anything.
    Validate { config: PathBuf },
}

fn load(path: &Path, o: &Overrides) -> Result<ExperimentConfig, SimError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = o.seed {
        cfg.cohort.seed = seed;
    }
    if let Some(reps) = o.reps {
        cfg.reps = reps;
    }
    if let Some(h) = o.horizon {
        cfg.horizon = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(e: &SimError) -> u8 {
    match e {
        SimError::Io(_) => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

fn run(cmd: Command) -> Result<u8, SimError> {
    match cmd {
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            println!("{}: ok", config.display());
            Ok(0)
        }
        Command::Run {
            config,
            overrides,
            quiet,
        } => {
            let cfg = load(&config, &overrides)?;
            prepare_output_dir(&cfg.out_dir)?;
            let mut progress = |line: &str| {
                if !quiet {
                    eprintln!("{line}");
                }
            };
            let results = run_experiment(&cfg, &mut progress)?;
            emit_reports(&results, &cfg.out_dir)?;
            let failed = results.failures().len();
            if !quiet {
                print!("{}", plis::report::summary_text(&results));
            }
            println!(
                "{} runs, {} failed, reports in {}",
                results.records.len(),
                failed,
                cfg.out_dir.display()
            );
            Ok(if failed > 0 { EXIT_PARTIAL } else { 0 })
        }
        Command::Plan {
            config,
            eps,
            psi,
            patient,
            controller,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let plan = plan_for(&cfg, patient, controller.into(), ErrorBudget::new(eps, psi)?)?;
            println!("q_inv            {}", plan.q_inv);
            println!("intervals        {}", plan.intervals.len());
            println!("trace error      {:.6} ({:?})", plan.trace_error, plan.mode);
            println!("max interval r   {:.6}", plan.max_interval_error());
            println!("converged        {}", plan.converged);
            println!("iterations       {}", plan.iterations);
            Ok(if plan.converged { 0 } else { EXIT_PARTIAL })
        }
        Command::FitKoopman {
            traces,
            order,
            step,
            out,
        } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&traces)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(SimError::Config(format!("no .csv traces in {}", traces.display())));
            }
            let data = files
                .iter()
                .map(|f| read_trace_csv(f).map(|t| Snapshots::from(&t)))
                .collect::<Result<Vec<_>, _>>()?;
            let model = dmd_fit(&data, order, &AP_DELAY_ORDER, step)?;
            model.save(&out)?;
            println!(
                "fitted order {} on {} traces: fit error {:.3e}, spectral radius {:.6}, written to {}",
                model.n_k,
                data.len(),
                model.fit_error,
                model.spectral_radius(),
                out.display()
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
