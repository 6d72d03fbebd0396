use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use nrhc::metrics::RunSummary;
use nrhc::output::{write_outputs, Outcome};
use nrhc::scenario::{self, load_scenario, preset, Scenario, ScenarioError, PRESETS};
use nrhc::simulator::Aborted;
use nrhc::tpbvp::Prediction;

const EXIT_INVALID: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "nrhc",
    version,
    about = "Distributed receding horizon consensus simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or a scenario file and write CSV/JSON outputs.
    Run(RunArgs),
    /// Check a scenario file and report every problem found.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Inspect the built-in presets.
    Presets {
        #[command(subcommand)]
        command: PresetCommand,
    },
}

#[derive(Subcommand)]
enum PresetCommand {
    /// List preset names.
    List,
    /// Print a preset as a scenario document.
    Show { name: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictionArg {
    Frozen,
    OpenLoop,
}

impl From<PredictionArg> for Prediction {
    fn from(p: PredictionArg) -> Self {
        match p {
            PredictionArg::Frozen => Prediction::Frozen,
            PredictionArg::OpenLoop => Prediction::OpenLoop,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(
        long,
        conflicts_with = "scenario",
        required_unless_present = "scenario"
    )]
    preset: Option<String>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Real-time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Target step on the horizon axis.
    #[arg(long)]
    dtau: Option<f64>,
    /// How neighbor and leader states are predicted over the horizon.
    #[arg(long, value_enum)]
    prediction: Option<PredictionArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Failure classes that map onto distinct exit codes.
enum Failure {
    Invalid(anyhow::Error),
    Diverged(anyhow::Error),
    Other(anyhow::Error),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Invalid(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn scenario_for(args: &RunArgs) -> Result<Scenario, ScenarioError> {
    let mut s = match (&args.preset, &args.scenario) {
        (Some(name), _) => preset(name)?,
        (None, Some(path)) => load_scenario(path)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let sim = &mut s.simulation;
    if let Some(v) = args.duration {
        sim.duration = v;
    }
    if let Some(v) = args.dt {
        sim.dt = v;
    }
    if let Some(v) = args.dtau {
        sim.dtau_target = v;
    }
    if let Some(v) = args.seed {
        sim.seed = v;
    }
    if let Some(p) = args.prediction {
        sim.neighbor_prediction = p.into();
        sim.leader_prediction = p.into();
    }
    s.validate()?;
    Ok(s)
}

fn print_summary(m: &RunSummary) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |t| format!("{t:.2}"));
    println!("t_final           {:.4}", m.final_time);
    println!(
        "max pairwise      {:.4e} -> {:.4e}",
        m.initial_max_pairwise, m.final_max_pairwise
    );
    println!(
        "time to 10% / 1%  {} / {}",
        opt(m.time_to_10_percent),
        opt(m.time_to_1_percent)
    );
    if let (Some(a), Some(b)) = (m.initial_max_leader_error, m.final_max_leader_error) {
        println!("leader error      {a:.4e} -> {b:.4e}");
        println!(
            "leader 10% / 1%   {} / {}",
            opt(m.leader_time_to_10_percent),
            opt(m.leader_time_to_1_percent)
        );
    }
    println!("final residual    {:.4e}", m.final_max_residual);
    println!("peak |u|          {:.4e}", m.peak_control);
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let scenario = scenario_for(args)?;
    let (log, outcome) = match scenario::run(&scenario) {
        Ok(log) => (log, Outcome::Completed),
        Err(scenario::RunError::Invalid(e)) => return Err(Failure::Invalid(e.into())),
        Err(scenario::RunError::Aborted(a)) => {
            let Aborted { error, partial } = *a;
            let error = format!("{:#}", anyhow::Error::new(error));
            (partial, Outcome::Diverged { error })
        }
    };
    if !log.records.is_empty() {
        write_outputs(&scenario, &log, &outcome, &args.out)
            .with_context(|| format!("writing outputs to {}", args.out.display()))?;
        print_summary(&RunSummary::from_log(&log).context("summarizing run")?);
        println!("outputs written to {}", args.out.display());
    }
    match outcome {
        Outcome::Completed => Ok(()),
        Outcome::Diverged { error } => Err(Failure::Diverged(anyhow::anyhow!(error))),
    }
}

fn validate(path: &Path) -> Result<(), Failure> {
    let s = load_scenario(path)?;
    println!(
        "{}: valid ({} agents, {} model{})",
        s.name,
        s.n_agents(),
        s.model,
        if s.topology.leader.is_some() {
            ", with leader"
        } else {
            ""
        }
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Validate { scenario } => validate(scenario),
        Command::Presets { command } => match command {
            PresetCommand::List => {
                for name in PRESETS {
                    println!("{name}");
                }
                Ok(())
            }
            PresetCommand::Show { name } => preset(name)
                .map(|s| println!("{}", s.to_json()))
                .map_err(Failure::from),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Diverged(e)) => {
            eprintln!("diverged: {e:#}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
