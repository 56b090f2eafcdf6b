//! Experiment configuration: one JSON document, overridden field by field by
//! command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eightport::detector::Efficiency;
use eightport::eightport::{CoherentMixture, StateSpec};
use eightport::fock::{
    CoherentSuperposition, ComplexAmplitude, FockDensityMatrix, TruncationBudget, C64,
};
use eightport::grid::GridSpec;
use eightport::tomography::DeconvolutionPolicy;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub state: Option<StateConfig>,
    pub parameter_field: Option<StateConfig>,
    pub efficiencies: Option<Vec<f64>>,
    pub r: Option<f64>,
    pub r_schedule: Option<Vec<f64>>,
    pub theta: Option<f64>,
    pub phi: Option<f64>,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub t_count: Option<usize>,
    pub interval: Option<[f64; 2]>,
    pub n_max: Option<usize>,
    pub cutoff: Option<usize>,
    pub tail_tol: Option<f64>,
    pub quadrature_nodes: Option<usize>,
    pub grid: Option<GridSpec>,
    pub policy: Option<DeconvolutionPolicy>,
    pub support_envelope: Option<f64>,
    pub shots: Option<u64>,
    pub seed: Option<u64>,
    pub input: Option<PathBuf>,
    pub smeared_input: Option<bool>,
    pub out_dir: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Fields set in `flags` replace those of `self`.
    pub fn overlay(mut self, flags: ExperimentConfig) -> Self {
        let dst = &mut self;
        let src = flags;
        overlay!(dst, src;
            state, parameter_field, efficiencies, r, r_schedule, theta, phi, t_min, t_max,
            t_count, interval, n_max, cutoff, tail_tol, quadrature_nodes, grid, policy,
            support_envelope, shots, seed, input, smeared_input, out_dir,
        );
        self
    }

    pub fn budget(&self, default_cutoff: usize) -> CliResult<TruncationBudget> {
        Ok(TruncationBudget::new(
            self.cutoff.unwrap_or(default_cutoff),
            self.tail_tol.unwrap_or(1e-10),
        )?)
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol.unwrap_or(1e-10)
    }

    /// Efficiencies broadcast to `n` detectors; a single value applies to all.
    pub fn efficiencies<const N: usize>(&self) -> CliResult<[Efficiency; N]> {
        let raw = self.efficiencies.clone().unwrap_or_else(|| vec![1.0]);
        let raw = match raw.len() {
            1 => vec![raw[0]; N],
            n if n == N => raw,
            n => {
                return Err(CliError::Usage(format!(
                    "expected 1 or {N} efficiencies, got {n}"
                )))
            }
        };
        let mut out = [Efficiency::IDEAL; N];
        for (o, v) in out.iter_mut().zip(raw) {
            *o = Efficiency::new(v).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn state(&self) -> CliResult<&StateConfig> {
        self.state
            .as_ref()
            .ok_or_else(|| CliError::Usage("missing state (--state or \"state\")".into()))
    }

    pub fn parameter_field(&self) -> StateConfig {
        self.parameter_field.clone().unwrap_or(StateConfig::Vacuum)
    }

    pub fn grid(&self) -> CliResult<GridSpec> {
        let g = self.grid.unwrap_or_default();
        g.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(g)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// Seed for a sampling command, which refuses to run without one.
    pub fn require_seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Usage("sampling needs an explicit --seed".into()))
    }
}

/// A quantum state in one of the textual or structured forms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateRepr", into = "StateRepr")]
pub enum StateConfig {
    Vacuum,
    Coherent(ComplexAmplitude),
    Cat {
        alpha: ComplexAmplitude,
        sign: f64,
    },
    Number(usize),
    FockDiagonal(Vec<f64>),
    /// Terms `(coefficient, amplitude)` of a coherent superposition.
    Terms(Vec<(C64, ComplexAmplitude)>),
    Mixture(Vec<(f64, StateConfig)>),
    File(PathBuf),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StateRepr {
    Text(String),
    Structured(StructuredState),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum StructuredState {
    /// `[coefficient_re, coefficient_im, alpha_re, alpha_im]` per term.
    Superposition(Vec<[f64; 4]>),
    FockDiagonal(Vec<f64>),
    Mixture(Vec<MixtureEntry>),
    File(PathBuf),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureEntry {
    weight: f64,
    state: StateConfig,
}

impl TryFrom<StateRepr> for StateConfig {
    type Error = String;
    fn try_from(r: StateRepr) -> Result<Self, String> {
        Ok(match r {
            StateRepr::Text(s) => s.parse()?,
            StateRepr::Structured(StructuredState::Superposition(t)) => StateConfig::Terms(
                t.iter()
                    .map(|v| (C64::new(v[0], v[1]), ComplexAmplitude::new(v[2], v[3])))
                    .collect(),
            ),
            StateRepr::Structured(StructuredState::FockDiagonal(p)) => StateConfig::FockDiagonal(p),
            StateRepr::Structured(StructuredState::Mixture(m)) => {
                StateConfig::Mixture(m.into_iter().map(|e| (e.weight, e.state)).collect())
            }
            StateRepr::Structured(StructuredState::File(p)) => StateConfig::File(p),
        })
    }
}

impl From<StateConfig> for StateRepr {
    fn from(s: StateConfig) -> Self {
        match s {
            StateConfig::Terms(t) => StateRepr::Structured(StructuredState::Superposition(
                t.iter().map(|(c, a)| [c.re, c.im, a.re, a.im]).collect(),
            )),
            StateConfig::Mixture(m) => StateRepr::Structured(StructuredState::Mixture(
                m.into_iter()
                    .map(|(weight, state)| MixtureEntry { weight, state })
                    .collect(),
            )),
            StateConfig::File(p) => StateRepr::Structured(StructuredState::File(p)),
            other => StateRepr::Text(other.to_string()),
        }
    }
}

fn parse_args(body: &str) -> Result<Vec<f64>, String> {
    body.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad number {s:?}: {e}"))
        })
        .collect()
}

/// `vacuum`, `coherent(re,im)`, `cat(re,im[,sign])`, `number(n)`,
/// `fock(p0,p1,...)`; a bare `coherent(re)` has zero imaginary part.
impl FromStr for StateConfig {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "vacuum" {
            return Ok(StateConfig::Vacuum);
        }
        let (name, rest) = s
            .split_once('(')
            .ok_or_else(|| format!("unknown state {s:?}"))?;
        let body = rest
            .strip_suffix(')')
            .ok_or_else(|| format!("missing ')' in {s:?}"))?;
        let args = parse_args(body)?;
        let amp = |a: &[f64]| match a {
            [re] => Ok(ComplexAmplitude::new(*re, 0.0)),
            [re, im, ..] => Ok(ComplexAmplitude::new(*re, *im)),
            [] => Err(format!("{name} needs an amplitude")),
        };
        match name.trim() {
            "coherent" if args.len() <= 2 => Ok(StateConfig::Coherent(amp(&args)?)),
            "cat" if args.len() <= 3 => Ok(StateConfig::Cat {
                alpha: amp(&args)?,
                sign: if args.len() == 3 { args[2] } else { 1.0 },
            }),
            "number" if args.len() == 1 && args[0] >= 0.0 && args[0].fract() == 0.0 => {
                Ok(StateConfig::Number(args[0] as usize))
            }
            "fock" => Ok(StateConfig::FockDiagonal(args)),
            _ => Err(format!("cannot parse state {s:?}")),
        }
    }
}

impl fmt::Display for StateConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            StateConfig::Vacuum => write!(f, "vacuum"),
            StateConfig::Coherent(a) => write!(f, "coherent({},{})", a.re, a.im),
            StateConfig::Cat { alpha, sign } => write!(f, "cat({},{},{sign})", alpha.re, alpha.im),
            StateConfig::Number(n) => write!(f, "number({n})"),
            StateConfig::FockDiagonal(p) => write!(f, "fock({})", list(p)),
            StateConfig::Terms(t) => write!(f, "superposition of {} terms", t.len()),
            StateConfig::Mixture(m) => write!(f, "mixture of {} states", m.len()),
            StateConfig::File(p) => write!(f, "file {}", p.display()),
        }
    }
}

impl StateConfig {
    fn unsupported(&self, what: &str) -> CliError {
        CliError::Usage(format!("state {self} {what}"))
    }

    pub fn superposition(&self) -> CliResult<CoherentSuperposition> {
        Ok(match self {
            StateConfig::Vacuum => CoherentSuperposition::vacuum(),
            StateConfig::Coherent(a) => CoherentSuperposition::coherent(*a),
            StateConfig::Cat { alpha, sign } => CoherentSuperposition::cat(*alpha, *sign)?,
            StateConfig::Terms(t) => CoherentSuperposition::new(t.clone())?.normalized(),
            _ => return Err(self.unsupported("is not a coherent superposition")),
        })
    }

    /// Coherent-state form used by the exact finite-amplitude statistics.
    pub fn state_spec(&self) -> CliResult<StateSpec> {
        let mixture = match self {
            StateConfig::Mixture(m) => CoherentMixture::new(
                m.iter()
                    .map(|(w, s)| Ok((*w, s.superposition()?)))
                    .collect::<CliResult<_>>()?,
            )?,
            other => CoherentMixture::pure(other.superposition()?),
        };
        Ok(StateSpec::Coherent(mixture))
    }

    pub fn density(&self, budget: TruncationBudget) -> CliResult<FockDensityMatrix> {
        Ok(match self {
            StateConfig::Number(n) if *n <= budget.cutoff() => {
                FockDensityMatrix::number_state(*n, budget)
            }
            StateConfig::Number(n) => {
                return Err(CliError::Usage(format!(
                    "number({n}) exceeds cutoff {}",
                    budget.cutoff()
                )))
            }
            StateConfig::FockDiagonal(p) => FockDensityMatrix::diagonal(p, budget)?,
            StateConfig::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("cannot read state {}: {e}", path.display()))
                })?;
                let rho: FockDensityMatrix = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("state {}: {e}", path.display())))?;
                StateSpec::Fock(rho).to_density(budget)?
            }
            other => other.state_spec()?.to_density(budget)?,
        })
    }
}
