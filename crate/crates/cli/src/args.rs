use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "switchdiff", version, about = "Two-scale Markov-modulated diffusions: simulation, averaging, rate functions")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Model config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; overrides SWITCHDIFF_THREADS. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model assumptions and report the derived constants.
    Validate(ValidateArgs),
    /// Simulate one trajectory, or an ensemble with --n > 1.
    Simulate(SimArgs),
    /// Solve the averaged dynamics, optionally with a law-of-large-numbers table.
    Average(AverageArgs),
    /// Occupation fractions of the fast states along one trajectory.
    Occupation(OccupationArgs),
    /// Evaluate the rate function along a path.
    Ratefn(RatefnArgs),
    /// Perturb a triple into controls with a unique closed loop.
    Perturb(PerturbArgs),
    /// Monte Carlo estimates of a terminal event over several eps.
    Sweep(SweepArgs),
    /// Minimal rate over paths ending in an event, optionally against a sweep.
    Compare(CompareArgs),
    /// Controlled ensembles following a perturbed target path.
    Tilt(TiltArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    /// Half-width of the probe cube around the origin.
    #[arg(long, default_value_t = 3.0)]
    pub half_width: f64,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct StartArgs {
    /// Initial slow state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Vec<f64>,
    /// Initial fast state (1-based).
    #[arg(long, default_value_t = 1)]
    pub y0: usize,
    #[arg(long, default_value_t = 1.0)]
    pub t_end: f64,
    /// Time step.
    #[arg(long, default_value_t = 0.01)]
    pub h: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimArgs {
    #[command(flatten)]
    pub start: StartArgs,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, default_value_t = 1)]
    pub n: u64,
    /// Stream of a single trajectory.
    #[arg(long, default_value_t = 1)]
    pub stream: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct AverageArgs {
    #[command(flatten)]
    pub start: StartArgs,
    /// eps values for the law-of-large-numbers table.
    #[arg(long, value_delimiter = ',')]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct OccupationArgs {
    #[command(flatten)]
    pub start: StartArgs,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, default_value_t = 1)]
    pub stream: u64,
    /// Horizon of the occupation measure; defaults to --t-end.
    #[arg(long)]
    pub t: Option<f64>,
}

#[derive(Debug, Args, Clone, Copy, Serialize)]
pub struct LocalArgs {
    #[arg(long, default_value_t = 8)]
    pub multistart: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RatefnArgs {
    /// Path CSV with columns t, x_1..x_d.
    #[arg(long)]
    pub path: PathBuf,
    #[command(flatten)]
    pub local: LocalArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripleKind {
    /// Stationary law, unthinned rates and the least drift control.
    ZeroCost,
    /// Minimizers of the local rate.
    Optimal,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct PerturbInput {
    /// Path CSV; defaults to the averaged path from --x0.
    #[arg(long)]
    pub path: Option<PathBuf>,
    #[command(flatten)]
    pub start: StartArgs,
    #[arg(long, value_enum, default_value_t = TripleKind::ZeroCost)]
    pub triple: TripleKind,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Fixed mixing weight instead of the computed one.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Skip the uniform rescaling of the input rates.
    #[arg(long)]
    pub no_cap: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub input: PerturbInput,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct EventArgs {
    /// Terminal event as JSON, e.g. '{"kind":"terminal-halfspace","normal":[1],"threshold":1}',
    /// or @FILE.
    #[arg(long)]
    pub event: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub start: StartArgs,
    #[command(flatten)]
    pub event: EventArgs,
    /// Strictly decreasing eps values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub eps: Vec<f64>,
    /// Trajectories per eps (one value, or one per eps).
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub start: StartArgs,
    #[command(flatten)]
    pub event: EventArgs,
    #[arg(long, default_value_t = 8)]
    pub k_nodes: usize,
    #[arg(long)]
    pub no_refine: bool,
    /// Also run a sweep over these eps.
    #[arg(long, value_delimiter = ',')]
    pub eps: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TiltArgs {
    #[command(flatten)]
    pub input: PerturbInput,
    #[arg(long, value_delimiter = ',', required = true)]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub n: u64,
    /// Simulation step; defaults to --h.
    #[arg(long)]
    pub h_sim: Option<f64>,
}
