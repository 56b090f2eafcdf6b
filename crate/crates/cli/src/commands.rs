use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use eightport::detector::{smeared_number_povm_element, Efficiency};
use eightport::eightport::{
    conjugate_generating_operator, generating_operator_convolution_with, joint_finite_distribution,
    ks_distance, limit_density_from_arms, purity_extremality_check, reduce_to_double_homodyne,
    sample_joint_counts, CovariantEvaluator, EightPortConfig, PurityReport, SmearKernel2D,
    DEFAULT_QUADRATURE_NODES,
};
use eightport::fock::{validate_density, ComplexAmplitude, DensityReport};
use eightport::grid::PhaseSpaceGrid;
use eightport::homodyne::{
    convergence_report, finite_z_char_fn, finite_z_distribution, limit_char_fn,
    superposition_char_fn, ConvergenceReport, ConvergenceSchedule, LocalOscillator,
};
use eightport::io::fmt_f64;
use eightport::tomography::{
    deconvolve as deconvolve_grid, fidelity, forward_smear, histogram_density,
    reconstruct_state_with, sample_phase_space, ConditionReport, DeconvolutionPolicy,
    ReconstructionOptions, ReconstructionReport,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, StateConfig};
use crate::error::{CliError, CliResult};
use crate::output::{read_grid, Outputs};

/// Completeness must hold this tightly on every fully covered level.
const COMPLETENESS_TOL: f64 = 1e-12;
/// The joint count CSV is skipped beyond this many cells.
const JOINT_CSV_LIMIT: usize = 5_000_000;
/// Slack of the `O(1/r)` decay gate.
const DECAY_SLACK: f64 = 0.25;
/// Density mass at the grid boundary that triggers a coverage warning.
const COVERAGE_THRESHOLD: f64 = 1e-8;

fn finish<T: Serialize>(out: Outputs, report: &T) -> CliResult<()> {
    out.commit()?;
    let text = serde_json::to_string_pretty(report).map_err(eightport::Error::from)?;
    // a closed pipe on stdout is not a failure; the files are already written
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn require<T: Copy>(v: Option<T>, what: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

fn t_grid(cfg: &ExperimentConfig) -> Vec<f64> {
    let (lo, hi, n) = (
        cfg.t_min.unwrap_or(-5.0),
        cfg.t_max.unwrap_or(5.0),
        cfg.t_count.unwrap_or(101),
    );
    if n <= 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Serialize)]
struct PovmReport {
    efficiency: f64,
    n_max: usize,
    cutoff: usize,
    checked_levels: usize,
    completeness_defect: f64,
    passed: bool,
}

pub fn povm(cfg: &ExperimentConfig, mut out: Outputs) -> CliResult<()> {
    if cfg.efficiencies.is_none() {
        return Err(CliError::Usage("missing --eps".into()));
    }
    let [eps] = cfg.efficiencies::<1>()?;
    let n_max = require(cfg.n_max, "--n-max")?;
    let budget = cfg.budget(cfg.cutoff.unwrap_or(n_max))?;
    let rows: Vec<Vec<f64>> = (0..=n_max)
        .map(|n| smeared_number_povm_element(eps, n, budget))
        .collect();
    let checked = n_max.min(budget.cutoff()) + 1;
    let defect = (0..checked)
        .map(|m| (rows.iter().map(|r| r[m]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let report = PovmReport {
        efficiency: eps.value(),
        n_max,
        cutoff: budget.cutoff(),
        checked_levels: checked,
        completeness_defect: defect,
        passed: defect < COMPLETENESS_TOL,
    };
    out.csv("povm.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["n", "m", "value"])?;
        for (n, r) in rows.iter().enumerate() {
            for (m, v) in r.iter().enumerate() {
                c.write_record([n.to_string(), m.to_string(), fmt_f64(*v)])?;
            }
        }
        c.flush()?;
        Ok(())
    })?;
    out.plot("povm.dat", |w| {
        for (n, r) in rows.iter().enumerate() {
            for (m, v) in r.iter().enumerate() {
                writeln!(w, "{n} {m} {}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    out.json("povm_report.json", &report)?;
    finish(out, &report)?;
    if !report.passed {
        return Err(CliError::Invariant(format!(
            "completeness defect {defect:.3e} >= {COMPLETENESS_TOL:e}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct HomodyneReport {
    state: String,
    r: f64,
    theta: f64,
    efficiencies: [f64; 2],
    atoms: usize,
    total: f64,
    tail_mass: f64,
    mean: f64,
    variance: f64,
    /// Largest gap between the closed-form characteristic function and the
    /// transform of the emitted distribution.
    char_fn_gap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    interval: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    interval_probability: Option<f64>,
}

pub fn homodyne(cfg: &ExperimentConfig, mut out: Outputs) -> CliResult<()> {
    let state = cfg.state()?;
    let signal = state.superposition()?;
    let [e1, e2] = cfg.efficiencies::<2>()?;
    let theta = cfg.theta.unwrap_or(0.0);
    let lo = LocalOscillator::new(require(cfg.r, "--r")?, theta)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dist = finite_z_distribution(&signal, lo, e1, e2, cfg.tail_tol())?;
    let ts = t_grid(cfg);
    let rows: Vec<[f64; 5]> = ts
        .iter()
        .map(|&t| {
            let exact =
                superposition_char_fn(&signal, |a, b| finite_z_char_fn(a, b, lo, e1, e2, t));
            let limit =
                superposition_char_fn(&signal, |a, b| limit_char_fn(a, b, theta, e1, e2, t));
            [t, exact.re, exact.im, limit.re, limit.im]
        })
        .collect();
    let gap = rows
        .iter()
        .map(|r| (dist.char_fn(r[0]) - eightport::fock::C64::new(r[1], r[2])).norm())
        .fold(0.0, f64::max);
    let total = dist.total();
    let mean = dist.mean();
    let variance = dist
        .atoms
        .iter()
        .map(|(x, p)| (x - mean).powi(2) * p)
        .sum::<f64>()
        / total;
    let interval_probability = cfg
        .interval
        .map(|[a, b]| if a < b { dist.interval_prob(a, b) } else { 0.0 });
    let report = HomodyneReport {
        state: state.to_string(),
        r: lo.r(),
        theta,
        efficiencies: [e1.value(), e2.value()],
        atoms: dist.atoms.len(),
        total,
        tail_mass: dist.tail_mass,
        mean,
        variance,
        char_fn_gap: gap,
        interval: cfg.interval,
        interval_probability,
    };
    out.csv("homodyne_distribution.csv", |w| dist.write_csv(w))?;
    out.csv("homodyne_char_fn.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["t", "re", "im", "limit_re", "limit_im"])?;
        for r in &rows {
            c.write_record(r.map(fmt_f64))?;
        }
        c.flush()?;
        Ok(())
    })?;
    out.plot("homodyne_distribution.dat", |w| {
        for (x, p) in &dist.atoms {
            writeln!(w, "{} {}", fmt_f64(*x), fmt_f64(*p))?;
        }
        Ok(())
    })?;
    out.json("homodyne_report.json", &report)?;
    finish(out, &report)?;
    let bound = 1e-9 + 2.0 * dist.tail_mass;
    if gap > bound {
        return Err(CliError::Invariant(format!(
            "characteristic functions disagree by {gap:.3e} > {bound:.3e}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ConvergeOutput {
    state: String,
    theta: f64,
    efficiencies: [f64; 2],
    decay_gate_passed: bool,
    #[serde(flatten)]
    report: ConvergenceReport,
}

pub fn converge(cfg: &ExperimentConfig, mut out: Outputs) -> CliResult<()> {
    let state = cfg.state()?;
    let signal = state.superposition()?;
    let [e1, e2] = cfg.efficiencies::<2>()?;
    let theta = cfg.theta.unwrap_or(0.0);
    let amplitudes = cfg
        .r_schedule
        .clone()
        .or(cfg.r.map(|r| vec![r]))
        .ok_or_else(|| CliError::Usage("missing --r-schedule".into()))?;
    let schedule = ConvergenceSchedule::new(amplitudes, t_grid(cfg))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let report = convergence_report(&signal, theta, e1, e2, &schedule)?;
    let passed = report.decay_gate(DECAY_SLACK);
    out.csv("converge.csv", |w| report.write_csv(w))?;
    out.plot("converge.dat", |w| {
        for row in &report.rows {
            writeln!(w, "{} {}", fmt_f64(row.r), fmt_f64(row.sup_error))?;
        }
        Ok(())
    })?;
    let output = ConvergeOutput {
        state: state.to_string(),
        theta,
        efficiencies: [e1.value(), e2.value()],
        decay_gate_passed: passed,
        report,
    };
    out.json("converge_report.json", &output)?;
    finish(out, &output)?;
    if !passed {
        return Err(CliError::Invariant(
            "sup error does not decay like 1/r along the schedule".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct EightportReport {
    state: String,
    parameter_field: String,
    r: f64,
    theta: f64,
    phi: f64,
    efficiencies: [f64; 4],
    kernel_variance: [f64; 2],
    joint_cells: usize,
    joint_written: bool,
    tail_mass: f64,
    ks_distance: f64,
    limit_mass: f64,
    limit_mean: [f64; 2],
    limit_variance: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage_warning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<SampleSummary>,
}

#[derive(Serialize)]
struct SampleSummary {
    shots: u64,
    seed: u64,
    mean: [f64; 2],
    variance: [f64; 2],
}

/// Mean and variance per axis of a grid density, normalized by its mass.
fn grid_moments(g: &PhaseSpaceGrid) -> (f64, [f64; 2], [f64; 2]) {
    let mut s = [0.0; 5];
    for i in 0..g.nq {
        for j in 0..g.np {
            let (q, p, v) = (g.q(i), g.p(j), g.get(i, j));
            s[0] += v;
            s[1] += v * q;
            s[2] += v * p;
            s[3] += v * q * q;
            s[4] += v * p * p;
        }
    }
    let (mq, mp) = (s[1] / s[0], s[2] / s[0]);
    (
        s[0] * g.cell_area(),
        [mq, mp],
        [s[3] / s[0] - mq * mq, s[4] / s[0] - mp * mp],
    )
}

fn single_coherent(s: &StateConfig) -> CliResult<ComplexAmplitude> {
    match s {
        StateConfig::Vacuum => Ok(ComplexAmplitude::new(0.0, 0.0)),
        StateConfig::Coherent(a) => Ok(*a),
        other => Err(CliError::Usage(format!(
            "sampling needs coherent (or vacuum) inputs, got {other}"
        ))),
    }
}

pub fn eightport(cfg: &ExperimentConfig, write_joint: bool, mut out: Outputs) -> CliResult<()> {
    let state = cfg.state()?;
    let field = cfg.parameter_field();
    let efficiencies = cfg.efficiencies::<4>()?;
    let theta = cfg.theta.unwrap_or(0.0);
    let phi = cfg.phi.unwrap_or(FRAC_PI_2);
    let lo = LocalOscillator::new(require(cfg.r, "--r")?, theta)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = cfg.grid()?;
    let sampling = match cfg.shots {
        Some(shots) => Some((
            shots,
            cfg.require_seed()?,
            single_coherent(state)?,
            single_coherent(&field)?,
        )),
        None => None,
    };
    let setup = EightPortConfig {
        efficiencies,
        phi,
        lo,
    };
    let kernel = setup.kernel();
    let red = reduce_to_double_homodyne(&state.state_spec()?, &field.state_spec()?, &setup)?;
    let joint = joint_finite_distribution(&red, cfg.tail_tol())?;
    let limit = limit_density_from_arms(&red, &kernel, spec)?;
    let xs: Vec<f64> = (0..spec.nq).map(|i| limit.q(i)).collect();
    let ys: Vec<f64> = (0..spec.np).map(|j| limit.p(j)).collect();
    let ks = ks_distance(&joint, &red, &kernel, &xs, &ys);
    let (mass, mean, variance) = grid_moments(&limit);
    let joint_written = write_joint && joint.len() <= JOINT_CSV_LIMIT;
    let samples = sampling.map(|(shots, seed, alpha, beta)| {
        let counts = sample_joint_counts(alpha, beta, &setup, shots as usize, seed);
        (shots, seed, counts)
    });
    let summary = samples.as_ref().map(|(shots, seed, counts)| {
        let pts: Vec<(f64, f64)> = counts.iter().map(|c| joint.outcome(*c)).collect();
        let n = pts.len().max(1) as f64;
        let m = [
            pts.iter().map(|p| p.0).sum::<f64>() / n,
            pts.iter().map(|p| p.1).sum::<f64>() / n,
        ];
        let v = [
            pts.iter().map(|p| (p.0 - m[0]).powi(2)).sum::<f64>() / n,
            pts.iter().map(|p| (p.1 - m[1]).powi(2)).sum::<f64>() / n,
        ];
        SampleSummary {
            shots: *shots,
            seed: *seed,
            mean: m,
            variance: v,
        }
    });
    let report = EightportReport {
        state: state.to_string(),
        parameter_field: field.to_string(),
        r: lo.r(),
        theta,
        phi,
        efficiencies: efficiencies.map(Efficiency::value),
        kernel_variance: [kernel.variance_q(), kernel.variance_p()],
        joint_cells: joint.len(),
        joint_written,
        tail_mass: joint.tail_mass,
        ks_distance: ks,
        limit_mass: mass,
        limit_mean: mean,
        limit_variance: variance,
        coverage_warning: limit.coverage_warning(COVERAGE_THRESHOLD),
        samples: summary,
    };
    if joint_written {
        out.csv("eightport_joint.csv", |w| joint.write_csv(w))?;
    }
    out.grid("eightport_limit", &limit)?;
    if let Some((_, _, counts)) = &samples {
        out.csv("eightport_samples.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["shot", "k", "l", "m", "n"])?;
            for (i, s) in counts.iter().enumerate() {
                c.write_record([
                    i.to_string(),
                    s[0].to_string(),
                    s[1].to_string(),
                    s[2].to_string(),
                    s[3].to_string(),
                ])?;
            }
            c.flush()?;
            Ok(())
        })?;
    }
    out.json("eightport_report.json", &report)?;
    finish(out, &report)
}

#[derive(Serialize)]
struct GenopReport {
    parameter_field: String,
    efficiencies: [f64; 4],
    cutoff: usize,
    quadrature_nodes: usize,
    trace: f64,
    mean_photon_number: f64,
    diagonal: Vec<f64>,
    purity: PurityReport,
    validation: DensityReport,
}

pub fn genop(cfg: &ExperimentConfig, mut out: Outputs) -> CliResult<()> {
    let field = cfg.parameter_field();
    let efficiencies = cfg.efficiencies::<4>()?;
    let budget = cfg.budget(40)?;
    let nodes = cfg.quadrature_nodes.unwrap_or(DEFAULT_QUADRATURE_NODES);
    if nodes == 0 {
        return Err(CliError::Usage("quadrature needs at least one node".into()));
    }
    let s = field.density(budget)?;
    let kernel = SmearKernel2D::from_efficiencies(efficiencies);
    let t = generating_operator_convolution_with(
        &conjugate_generating_operator(&s),
        &kernel,
        budget,
        nodes,
    )?;
    let validation = validate_density(&t);
    let passed = validation.passed;
    let report = GenopReport {
        parameter_field: field.to_string(),
        efficiencies: efficiencies.map(Efficiency::value),
        cutoff: budget.cutoff(),
        quadrature_nodes: nodes,
        trace: t.trace(),
        mean_photon_number: t.mean_photon_number(),
        diagonal: t.populations(),
        purity: purity_extremality_check(&t),
        validation,
    };
    out.json("genop_operator.json", &t)?;
    out.json("genop_report.json", &report)?;
    finish(out, &report)?;
    if !passed {
        return Err(CliError::Invariant(
            "generating operator is not a density operator".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct DeconvolveReport {
    efficiencies: [f64; 4],
    input_mass: f64,
    output_mass: f64,
    /// Relative L2 gap between the input and the re-smeared output.
    roundtrip_relative_l2: f64,
    condition: ConditionReport,
}

fn sampled_policy(cfg: &ExperimentConfig) -> DeconvolutionPolicy {
    cfg.policy.unwrap_or_else(|| match cfg.shots {
        Some(m) => DeconvolutionPolicy::thresholded_for_samples(m),
        None => DeconvolutionPolicy::default(),
    })
}

pub fn deconvolve(cfg: &ExperimentConfig, mut out: Outputs) -> CliResult<()> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("missing --input".into()))?;
    let efficiencies = cfg.efficiencies::<4>()?;
    let policy = sampled_policy(cfg);
    policy
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let h = read_grid(input)?;
    let kernel = SmearKernel2D::from_efficiencies(efficiencies);
    let d = deconvolve_grid(&h, &kernel, policy)?;
    let back = forward_smear(&d.grid, &kernel)?;
    let report = DeconvolveReport {
        efficiencies: efficiencies.map(Efficiency::value),
        input_mass: h.mass(),
        output_mass: d.grid.mass(),
        roundtrip_relative_l2: back.relative_l2(&h)?,
        condition: d.report,
    };
    out.grid("deconvolved", &d.grid)?;
    out.json("deconvolve_report.json", &report)?;
    finish(out, &report)
}

#[derive(Serialize)]
struct ReconstructOutput {
    parameter_field: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_state: Option<String>,
    efficiencies: [f64; 4],
    cutoff: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    shots: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(flatten)]
    report: ReconstructionReport,
}

pub fn reconstruct(cfg: &ExperimentConfig, mut out: Outputs) -> CliResult<()> {
    let efficiencies = cfg.efficiencies::<4>()?;
    let kernel = SmearKernel2D::from_efficiencies(efficiencies);
    let budget = cfg.budget(30)?;
    let field = cfg.parameter_field();
    let policy = sampled_policy(cfg);
    policy
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let seed = match (&cfg.input, cfg.shots) {
        (None, Some(_)) => Some(cfg.require_seed()?),
        _ => None,
    };
    let reference = match (&cfg.input, &cfg.state) {
        (None, None) => return Err(CliError::Usage("give --input or --state".into())),
        (_, Some(s)) => Some((s.to_string(), s.density(budget)?)),
        (Some(_), None) => None,
    };
    let t = conjugate_generating_operator(&field.density(budget)?);
    let mut options = match cfg.shots {
        Some(m) => ReconstructionOptions::for_samples(kernel, m),
        None => ReconstructionOptions::default(),
    };
    if let Some(env) = cfg.support_envelope {
        if !(env > 0.0 && env < 1.0) {
            return Err(CliError::Usage(format!(
                "support envelope {env} outside (0, 1)"
            )));
        }
        options.support_envelope = env;
    }

    let (smeared, g) = match (&cfg.input, seed) {
        (Some(path), _) => {
            let grid = read_grid(path)?;
            if cfg.smeared_input.unwrap_or(false) {
                (Some(grid), None)
            } else {
                (None, Some(grid))
            }
        }
        (None, seed) => {
            let rho = &reference.as_ref().expect("state checked above").1;
            let spec = cfg.grid()?;
            let h = forward_smear(&CovariantEvaluator::new(rho, &t).grid(spec)?, &kernel)?;
            let h = match (cfg.shots, seed) {
                (Some(m), Some(seed)) => {
                    histogram_density(&sample_phase_space(&h, m as usize, seed)?, spec)?
                }
                _ => h,
            };
            (Some(h), None)
        }
    };
    let (g, condition) = match (smeared.as_ref(), g) {
        (Some(h), _) => {
            let d = deconvolve_grid(h, &kernel, policy)?;
            (d.grid, Some(d.report))
        }
        (None, Some(g)) => (g, None),
        (None, None) => unreachable!("one of the grids is always present"),
    };
    let mut rec = reconstruct_state_with(&g, &t, budget, options)?;
    rec.report.deconvolution = condition;
    if let Some((_, rho)) = &reference {
        rec.report.fidelity = Some(fidelity(&rec.state, rho)?);
    }
    let output = ReconstructOutput {
        parameter_field: field.to_string(),
        reference_state: reference.map(|r| r.0),
        efficiencies: efficiencies.map(Efficiency::value),
        cutoff: budget.cutoff(),
        shots: cfg.shots,
        seed,
        report: rec.report,
    };
    if cfg.input.is_none() {
        if let Some(h) = &smeared {
            out.grid("reconstruct_smeared", h)?;
        }
    }
    out.json("reconstruct_state.json", &rec.state)?;
    out.json("reconstruct_report.json", &output)?;
    finish(out, &output)
}
