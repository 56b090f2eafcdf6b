mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eightport::grid::GridSpec;
use eightport::tomography::DeconvolutionPolicy;

use config::{ExperimentConfig, StateConfig};
use error::{CliError, CliResult};
use output::Outputs;

/// Inefficient balanced and eight-port homodyne detection: statistics, limit
/// densities, deconvolution and state reconstruction.
#[derive(Parser, Debug)]
#[command(name = "eightport", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Diagonals of the smeared photon-number POVM and its completeness.
    Povm(PovmArgs),
    /// Scaled photocount-difference statistics of one balanced homodyne detector.
    Homodyne(HomodyneArgs),
    /// Characteristic-function error against the high-amplitude limit along an r schedule.
    Converge(ConvergeArgs),
    /// Joint four-detector counts, the limit phase-space density and their KS distance.
    Eightport(EightportArgs),
    /// Generating operator of the smeared covariant observable.
    Genop(GenopArgs),
    /// Removes the detector smearing from a phase-space grid.
    Deconvolve(DeconvolveArgs),
    /// Reconstructs a density matrix from a covariant density.
    Reconstruct(ReconstructArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write grids as JSON header plus little-endian f64 payload.
    #[arg(long)]
    binary: bool,
    /// Also write gnuplot-ready `.dat` column files.
    #[arg(long)]
    emit_plot_data: bool,
}

#[derive(Args, Debug, Default)]
struct DetectorArgs {
    /// Detector efficiencies, comma separated; one value applies to all detectors.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    eps: Option<Vec<f64>>,
    /// Local oscillator amplitude.
    #[arg(long)]
    r: Option<f64>,
    /// Local oscillator phase.
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct TruncationArgs {
    /// Highest retained photon number.
    #[arg(long)]
    cutoff: Option<usize>,
    /// Largest probability or trace allowed to leak past the truncation.
    #[arg(long)]
    tail_tol: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct GridArgs {
    /// Grid as `half_width,n` or `q_min,q_max,p_min,p_max,nq,np`.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    grid: Option<GridSpec>,
}

#[derive(Args, Debug, Default)]
struct SamplingArgs {
    /// Number of Monte Carlo shots.
    #[arg(long)]
    shots: Option<u64>,
    /// Random seed; required whenever sampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyMode {
    Exact,
    Thresholded,
    Tikhonov,
}

#[derive(Args, Debug, Default)]
struct PolicyArgs {
    /// Deconvolution policy.
    #[arg(long, value_enum)]
    policy: Option<PolicyMode>,
    /// Threshold on the kernel transform for the thresholded policy.
    #[arg(long)]
    threshold: Option<f64>,
    /// Tikhonov parameter; chosen by the discrepancy principle when absent.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct PovmArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Detector efficiency.
    #[arg(long, allow_negative_numbers = true)]
    eps: Option<f64>,
    /// Largest count n.
    #[arg(long)]
    n_max: Option<usize>,
    /// Highest photon number m (defaults to n-max).
    #[arg(long)]
    cutoff: Option<usize>,
}

#[derive(Args, Debug)]
struct HomodyneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Signal state, e.g. `vacuum`, `coherent(0.6,0.4)`, `cat(1.5)`.
    #[arg(long)]
    state: Option<StateConfig>,
    #[command(flatten)]
    detector: DetectorArgs,
    #[arg(long)]
    tail_tol: Option<f64>,
    /// Characteristic-function grid `t_min,t_max,count`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    t_grid: Option<Vec<f64>>,
    /// Probability of the outcome interval `(lo, hi]`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    interval: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ConvergeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    state: Option<StateConfig>,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Increasing oscillator amplitudes.
    #[arg(long, value_delimiter = ',')]
    r_schedule: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    t_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct EightportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Signal state.
    #[arg(long)]
    state: Option<StateConfig>,
    /// Parameter field S fed to the second input port.
    #[arg(long)]
    parameter_field: Option<StateConfig>,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Phase shift between the two arms.
    #[arg(long, allow_negative_numbers = true)]
    phi: Option<f64>,
    #[arg(long)]
    tail_tol: Option<f64>,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Skip the joint count CSV.
    #[arg(long)]
    no_joint: bool,
}

#[derive(Args, Debug)]
struct GenopArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    parameter_field: Option<StateConfig>,
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[command(flatten)]
    truncation: TruncationArgs,
    /// Gauss-Hermite nodes per smeared axis.
    #[arg(long)]
    nodes: Option<usize>,
}

#[derive(Args, Debug)]
struct DeconvolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Smeared grid (CSV or binary).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Number of samples behind the input histogram; sets the noise-aware defaults.
    #[arg(long)]
    shots: Option<u64>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Covariant density (or smeared density with `--smeared`); without it the
    /// pipeline is simulated from `--state`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// The input grid still carries the detector smearing.
    #[arg(long)]
    smeared: bool,
    /// State to simulate, or the reference state for the fidelity.
    #[arg(long)]
    state: Option<StateConfig>,
    #[arg(long)]
    parameter_field: Option<StateConfig>,
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[command(flatten)]
    truncation: TruncationArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Vacuum-envelope level bounding the inversion support.
    #[arg(long)]
    support_envelope: Option<f64>,
}

fn parse_grid(s: &str) -> Result<GridSpec, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let count = |x: f64| {
        if x >= 2.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(format!("grid size {x} must be an integer >= 2"))
        }
    };
    let spec = match v.as_slice() {
        [h, n] => GridSpec::square(*h, count(*n)?),
        [q0, q1, p0, p1, nq, np] => GridSpec {
            q_min: *q0,
            q_max: *q1,
            p_min: *p0,
            p_max: *p1,
            nq: count(*nq)?,
            np: count(*np)?,
        },
        _ => return Err("expected half_width,n or q_min,q_max,p_min,p_max,nq,np".into()),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn t_grid_fields(v: &Option<Vec<f64>>, cfg: &mut ExperimentConfig) -> CliResult<()> {
    match v.as_deref() {
        None => Ok(()),
        Some([lo, hi, n]) if *n >= 1.0 && n.fract() == 0.0 => {
            cfg.t_min = Some(*lo);
            cfg.t_max = Some(*hi);
            cfg.t_count = Some(*n as usize);
            Ok(())
        }
        Some(_) => Err(CliError::Usage("--t-grid expects t_min,t_max,count".into())),
    }
}

impl DetectorArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        cfg.efficiencies = self.eps.clone();
        cfg.r = self.r;
        cfg.theta = self.theta;
    }
}

impl PolicyArgs {
    /// `None` when no policy flag was given; a bare parameter implies its mode.
    fn policy(&self) -> CliResult<Option<DeconvolutionPolicy>> {
        let mode = match (self.policy, self.threshold, self.lambda) {
            (Some(m), _, _) => m,
            (None, Some(_), None) => PolicyMode::Thresholded,
            (None, None, Some(_)) => PolicyMode::Tikhonov,
            (None, None, None) => return Ok(None),
            (None, Some(_), Some(_)) => {
                return Err(CliError::Usage(
                    "--threshold and --lambda belong to different policies".into(),
                ))
            }
        };
        Ok(Some(match mode {
            PolicyMode::Exact => DeconvolutionPolicy::ExactDivision,
            PolicyMode::Thresholded => match self.threshold {
                Some(threshold) => DeconvolutionPolicy::Thresholded { threshold },
                None => DeconvolutionPolicy::default(),
            },
            PolicyMode::Tikhonov => DeconvolutionPolicy::Tikhonov {
                lambda: self.lambda,
                noise_level: None,
            },
        }))
    }
}

/// Configuration file (if any) with the command's flags laid over it.
fn resolve(common: &CommonArgs, flags: ExperimentConfig) -> CliResult<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.overlay(flags);
    if common.out_dir.is_some() {
        cfg.out_dir = common.out_dir.clone();
    }
    Ok(cfg)
}

fn outputs(common: &CommonArgs, cfg: &ExperimentConfig) -> Outputs {
    Outputs::new(cfg.out_dir(), common.binary, common.emit_plot_data)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Povm(a) => {
            let flags = ExperimentConfig {
                efficiencies: a.eps.map(|e| vec![e]),
                n_max: a.n_max,
                cutoff: a.cutoff,
                ..Default::default()
            };
            let cfg = resolve(&a.common, flags)?;
            commands::povm(&cfg, outputs(&a.common, &cfg))
        }
        Command::Homodyne(a) => {
            let mut flags = ExperimentConfig {
                state: a.state,
                tail_tol: a.tail_tol,
                ..Default::default()
            };
            a.detector.apply(&mut flags);
            t_grid_fields(&a.t_grid, &mut flags)?;
            flags.interval = match a.interval.as_deref() {
                None => None,
                Some([lo, hi]) => Some([*lo, *hi]),
                Some(_) => return Err(CliError::Usage("--interval expects lo,hi".into())),
            };
            let cfg = resolve(&a.common, flags)?;
            commands::homodyne(&cfg, outputs(&a.common, &cfg))
        }
        Command::Converge(a) => {
            let mut flags = ExperimentConfig {
                state: a.state,
                r_schedule: a.r_schedule,
                ..Default::default()
            };
            a.detector.apply(&mut flags);
            t_grid_fields(&a.t_grid, &mut flags)?;
            let cfg = resolve(&a.common, flags)?;
            commands::converge(&cfg, outputs(&a.common, &cfg))
        }
        Command::Eightport(a) => {
            let mut flags = ExperimentConfig {
                state: a.state,
                parameter_field: a.parameter_field,
                phi: a.phi,
                tail_tol: a.tail_tol,
                grid: a.grid.grid,
                shots: a.sampling.shots,
                seed: a.sampling.seed,
                ..Default::default()
            };
            a.detector.apply(&mut flags);
            let cfg = resolve(&a.common, flags)?;
            commands::eightport(&cfg, !a.no_joint, outputs(&a.common, &cfg))
        }
        Command::Genop(a) => {
            let flags = ExperimentConfig {
                parameter_field: a.parameter_field,
                efficiencies: a.eps,
                cutoff: a.truncation.cutoff,
                tail_tol: a.truncation.tail_tol,
                quadrature_nodes: a.nodes,
                ..Default::default()
            };
            let cfg = resolve(&a.common, flags)?;
            commands::genop(&cfg, outputs(&a.common, &cfg))
        }
        Command::Deconvolve(a) => {
            let flags = ExperimentConfig {
                input: a.input,
                efficiencies: a.eps,
                policy: a.policy.policy()?,
                shots: a.shots,
                ..Default::default()
            };
            let cfg = resolve(&a.common, flags)?;
            commands::deconvolve(&cfg, outputs(&a.common, &cfg))
        }
        Command::Reconstruct(a) => {
            let flags = ExperimentConfig {
                input: a.input,
                smeared_input: a.smeared.then_some(true),
                state: a.state,
                parameter_field: a.parameter_field,
                efficiencies: a.eps,
                cutoff: a.truncation.cutoff,
                tail_tol: a.truncation.tail_tol,
                grid: a.grid.grid,
                policy: a.policy.policy()?,
                shots: a.sampling.shots,
                seed: a.sampling.seed,
                support_envelope: a.support_envelope,
                ..Default::default()
            };
            let cfg = resolve(&a.common, flags)?;
            commands::reconstruct(&cfg, outputs(&a.common, &cfg))
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("EIGHTPORT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!("EIGHTPORT_THREADS={v:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eightport: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
