use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scora_core::monte_carlo::{ValidationConfig, DEFAULT_ORACLE_SAMPLES};
use scora_core::pipeline::{self, OutputPaths, Summary, EXIT_IO, EXIT_OK, EXIT_VALIDATION};
use scora_core::risk::TrajectoryPlan;
use scora_core::scenario::load_scenario_file;
use scora_core::scp::{ProblemSpec, SolveMode};

#[derive(Parser)]
#[command(name = "scora", version, about = "Chance-constrained trajectory optimization under obstacle and tracking uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a trajectory and write trajectory, risk trace and summary.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveArgs,
    },
    /// Monte Carlo check of a previously solved trajectory in --out-dir.
    Validate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Trajectory CSV; defaults to trajectory.csv in --out-dir.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Solve, validate and report in one run.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Compare every per-configuration risk bound on a trajectory with direct sampling.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV; defaults to the straight line from start to goal.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Samples per configuration.
        #[arg(long, default_value_t = DEFAULT_ORACLE_SAMPLES)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum, default_value_t = Mode::Scora)]
    mode: Mode,
    /// Write one JSON object per SCP iteration to this file.
    #[arg(long)]
    log_iterations: Option<PathBuf>,
}

#[derive(Args)]
struct Sampling {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Points along the executed path checked per trial, endpoints included.
    #[arg(long, default_value_t = 100)]
    upsample: usize,
}

impl Sampling {
    fn config(&self) -> ValidationConfig {
        ValidationConfig {
            trials: self.trials,
            upsample_waypoints: self.upsample,
            rng_seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Scora,
    EpsOpt,
}

impl From<Mode> for SolveMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Scora => SolveMode::Scora,
            Mode::EpsOpt => SolveMode::EpsOpt,
        }
    }
}

fn load(path: &Path) -> scora_core::Result<(String, ProblemSpec)> {
    let file = load_scenario_file(path)?;
    let name = file
        .name
        .clone()
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    Ok((name, file.to_problem()?))
}

fn print_summary(summary: &Summary) -> scora_core::Result<()> {
    print!("{}", summary.to_json()?);
    Ok(())
}

fn load_plan(spec: &ProblemSpec, trajectory: &Path, summary: Option<&Summary>) -> scora_core::Result<TrajectoryPlan> {
    let (waypoints, controls) = pipeline::read_trajectory_csv(trajectory, spec)?;
    Ok(TrajectoryPlan {
        waypoints,
        controls,
        tracking_covariance: spec.tracking_covariance.clone(),
        delta: summary.map_or(spec.budget, |s| s.delta),
        gamma: summary.map_or(0.0, |s| s.gamma),
        budget: spec.budget,
    })
}

fn run(cli: Cli) -> scora_core::Result<i32> {
    match cli.command {
        Command::Solve { common, solve } => {
            let (name, spec) = load(&common.scenario)?;
            let out = OutputPaths {
                dir: common.out_dir,
                iteration_log: solve.log_iterations,
            };
            let (summary, _) = pipeline::run_solve(&name, &spec, solve.mode.into(), &out)?;
            print_summary(&summary)?;
            Ok(summary.exit_code)
        }
        Command::Validate {
            common,
            sampling,
            trajectory,
        } => {
            let (_, spec) = load(&common.scenario)?;
            let out = OutputPaths::new(common.out_dir);
            let mut summary = pipeline::read_summary(&out.file(pipeline::SUMMARY_FILE))?;
            let trajectory = trajectory.unwrap_or_else(|| out.file(pipeline::TRAJECTORY_FILE));
            let plan = load_plan(&spec, &trajectory, Some(&summary))?;
            pipeline::run_validation(&spec, &plan, &sampling.config(), &mut summary, &out)?;
            print_summary(&summary)?;
            Ok(summary.exit_code)
        }
        Command::Pipeline {
            common,
            solve,
            sampling,
        } => {
            let (name, spec) = load(&common.scenario)?;
            let out = OutputPaths {
                dir: common.out_dir,
                iteration_log: solve.log_iterations,
            };
            let summary = pipeline::run_pipeline(&name, &spec, solve.mode.into(), &sampling.config(), &out)?;
            print_summary(&summary)?;
            Ok(summary.exit_code)
        }
        Command::Oracle {
            common,
            trajectory,
            trials,
            seed,
        } => {
            let (_, spec) = load(&common.scenario)?;
            let plan = match trajectory {
                Some(path) => load_plan(&spec, &path, None)?,
                None => pipeline::straight_line_plan(&spec),
            };
            let rows = pipeline::oracle_audit(&spec, &plan, trials, seed)?;
            std::fs::create_dir_all(&common.out_dir)?;
            pipeline::write_oracle_csv(&common.out_dir.join(pipeline::ORACLE_FILE), &rows)?;
            let unsound = rows.iter().filter(|r| !r.sound).count();
            println!("{} bounds checked, {} below the sampled estimate", rows.len(), unsound);
            Ok(if unsound == 0 { EXIT_OK } else { EXIT_VALIDATION })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_IO
        }
    };
    ExitCode::from(code as u8)
}
