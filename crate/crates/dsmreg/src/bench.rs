//! Experiment driver: sweeps problems, schedules, stopping rules, noise
//! levels, and seeds; runs the flow for each combination; and produces
//! deterministic per-run records, convergence-rate fits, and CSV outputs.
//!
//! Determinism contract: two executions of the same configuration produce
//! byte-identical `runs.csv` and `rates.csv`, independent of thread count
//! and execution order. Wall-clock times therefore live in a separate
//! `timings.csv` sidecar.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::io::format_full;
use crate::operator::{build_normal_system, spectral_decompose, NormalSystem};
use crate::problems::{
    fredholm_problem, hilbert_problem, source_condition_target, add_noise, FredholmKind,
    HilbertTarget, ProblemInstance,
};
use crate::schedule::{EpsilonSchedule, ScheduleSpec};
use crate::solver::{integrate_flow, log_grid, IntegrationOptions, Trajectory};
use crate::stopping::{apriori_stop, appendix_stop, minimize_h, oracle_stop, StoppingResult};

/// Recorded points per decade of t on every run's output grid.
const GRID_PER_DECADE: usize = 32;

/// Extra horizon past the reference stop time when the grid rule has to see
/// the minimum before choosing it: two decades.
const APPENDIX_HORIZON_FACTOR: f64 = 100.0;

/// Slack on the predicted-bound containment check `err_w <= eta`.
const ETA_SLACK: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Target selector for constructed problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetSpec {
    /// All-ones solution.
    Ones,
    /// Smooth decaying profile (the default).
    Smooth,
    /// Solution manufactured as B^a applied to a fixed vector, normalized;
    /// `a` is the smoothness order.
    Source { a: f64 },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Smooth
    }
}

/// One test problem in a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Hilbert-matrix problem of size n.
    Hilbert {
        n: usize,
        #[serde(default)]
        target: TargetSpec,
    },
    /// Gravimetric prospecting kernel on n midpoints; `target` replaces the
    /// built-in profile when present.
    Gravity {
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<TargetSpec>,
    },
    /// Second-derivative (Green's function) kernel on n midpoints; `target`
    /// replaces the built-in profile when present.
    Deriv2 {
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<TargetSpec>,
    },
}

/// One stopping rule in a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum RuleSpec {
    /// Spectral oracle: minimizes the exact error split for the known
    /// target.
    Oracle,
    /// Closed-form rule under a source condition of order `a` with bound R.
    Apriori {
        a: f64,
        #[serde(rename = "R")]
        r: f64,
    },
    /// Grid rule minimizing the noise-amplification-plus-error functional
    /// along the clean trajectory.
    Appendix,
}

impl RuleSpec {
    pub fn label(&self) -> String {
        match self {
            RuleSpec::Oracle => "oracle".to_string(),
            RuleSpec::Apriori { a, .. } => format!("apriori(a={a})"),
            RuleSpec::Appendix => "appendix".to_string(),
        }
    }
}

/// Full experiment description, deserializable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problems: Vec<ProblemSpec>,
    pub schedules: Vec<ScheduleSpec>,
    pub rules: Vec<RuleSpec>,
    /// Noise levels, strictly decreasing and positive.
    pub deltas: Vec<f64>,
    /// Relative tolerance handed to the flow integrator.
    pub integrator_tol: f64,
    pub seeds: Vec<u64>,
    /// Default directory for CSV outputs; the CLI may override it.
    pub output_dir: String,
}

impl ExperimentConfig {
    /// Check structural validity; every run of an invalid configuration is
    /// refused up front.
    pub fn validate(&self) -> Result<()> {
        fn bad(msg: impl Into<String>) -> Result<()> {
            Err(DsmError::InvalidConfig(msg.into()))
        }
        if self.problems.is_empty() {
            return bad("no problems listed");
        }
        if self.schedules.is_empty() {
            return bad("no schedules listed");
        }
        if self.rules.is_empty() {
            return bad("no rules listed");
        }
        if self.seeds.is_empty() {
            return bad("no seeds listed");
        }
        if self.deltas.is_empty() {
            return bad("no noise levels listed");
        }
        if !self.deltas.iter().all(|d| d.is_finite() && *d > 0.0) {
            return bad("noise levels must be positive and finite");
        }
        if !self.deltas.windows(2).all(|w| w[1] < w[0]) {
            return bad("noise levels must be strictly decreasing");
        }
        if !(self.integrator_tol > 0.0 && self.integrator_tol < 1.0) {
            return bad(format!(
                "integrator tolerance must lie in (0, 1), got {}",
                self.integrator_tol
            ));
        }
        Ok(())
    }
}

/// Parse and validate a configuration from JSON text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| DsmError::Parse {
        context: "experiment config".to_string(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Replace a problem's solution (and clean data) according to a target
/// override, adjusting the label so distinct targets never share one.
fn retarget(mut p: ProblemInstance, target: &TargetSpec) -> Result<ProblemInstance> {
    let n = p.operator.ncols();
    let (suffix, solution) = match target {
        TargetSpec::Ones => ("ones".to_string(), DVector::from_element(n, 1.0)),
        TargetSpec::Smooth => {
            let y = DVector::from_fn(n, |i, _| (-((i as f64 + 0.5) / n as f64)).exp());
            ("smooth".to_string(), y)
        }
        TargetSpec::Source { a } => (
            format!("src{a}"),
            source_condition_target(&p.operator, *a)?,
        ),
    };
    p.name = format!("{}-{suffix}", p.name);
    p.f_clean = p.operator.apply(&solution);
    p.solution = solution;
    Ok(p)
}

/// Build the problem instance a spec describes; target overrides get a
/// label suffix so distinct targets never share a label.
pub fn build_problem(spec: &ProblemSpec) -> Result<ProblemInstance> {
    match spec {
        ProblemSpec::Hilbert { n, target } => match target {
            TargetSpec::Smooth => hilbert_problem(*n, HilbertTarget::Smooth),
            target => retarget(hilbert_problem(*n, HilbertTarget::Smooth)?, target),
        },
        ProblemSpec::Gravity { n, target } => {
            let p = fredholm_problem(FredholmKind::Gravity, *n)?;
            match target {
                None => Ok(p),
                Some(t) => retarget(p, t),
            }
        }
        ProblemSpec::Deriv2 { n, target } => {
            let p = fredholm_problem(FredholmKind::Deriv2, *n)?;
            match target {
                None => Ok(p),
                Some(t) => retarget(p, t),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// Everything measured in one run. Numeric fields are empty when the run
/// was skipped or failed; `status` says why.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub problem: String,
    pub schedule: String,
    pub rule: String,
    pub delta: f64,
    pub seed: u64,
    /// Chosen level; empty for the grid rule, which picks a time directly.
    pub beta: Option<f64>,
    pub t_stop: Option<f64>,
    /// Predicted error bound at the stop.
    pub eta: Option<f64>,
    /// Observed ||u(t_stop) - y|| for the noisy flow.
    pub err_u: Option<f64>,
    /// Observed ||w(t_stop) - y|| for the comparison path.
    pub err_w: Option<f64>,
    /// Tracking gap ||u - w|| at the stop.
    pub gap: Option<f64>,
    /// Certified envelope for the gap at the stop.
    pub gronwall_bound: Option<f64>,
    /// Clean-trajectory bound c delta / eps(t) + a(t) at the stop.
    pub appendix_bound: Option<f64>,
    /// True when the oracle rule's predicted bound failed to contain the
    /// observed comparison error.
    pub eta_violated: bool,
    /// "ok", "skipped:<reason>", or "error:<message>".
    pub status: String,
    /// Seconds spent on this run; excluded from deterministic outputs.
    pub wall_time: f64,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// One fitted convergence rate: slope of log err_u against log delta over
/// the successful runs of a (problem, rule) group.
#[derive(Debug, Clone)]
pub struct RateFit {
    pub problem: String,
    pub rule: String,
    pub slope: f64,
    pub stderr: f64,
    pub n_points: usize,
}

/// Records plus derived rate fits.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub rates: Vec<RateFit>,
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Recording grid for one run: t = 0, then log-spaced points ending exactly
/// at t_stop.
fn record_grid(t_stop: f64) -> Result<Vec<f64>> {
    let mut times = vec![0.0];
    if t_stop <= 0.0 {
        return Ok(times);
    }
    let t_first = (t_stop / 1e4).min(1e-3);
    if t_stop <= t_first * 1.125 {
        times.push(t_stop);
        return Ok(times);
    }
    times.extend(log_grid(t_first, t_stop, GRID_PER_DECADE)?);
    Ok(times)
}

fn skip_reason(e: &DsmError) -> Option<&'static str> {
    match e {
        DsmError::LevelAboveStart { .. } => Some("skipped:level-above-start"),
        DsmError::LevelUnreachable { .. } => Some("skipped:level-unreachable"),
        _ => None,
    }
}

struct RunMeasurements {
    stop: StoppingResult,
    err_u: f64,
    err_w: f64,
    gap: f64,
    gronwall_bound: f64,
    appendix_bound: f64,
}

/// Integrate the clean flow on `grid` (it shares the operator, so its
/// trajectory carries the error values the grid rule and the clean-bound
/// column need).
fn clean_flow(
    p: &ProblemInstance,
    schedule: &EpsilonSchedule,
    grid: &[f64],
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    let sys = build_normal_system(&p.operator, &p.f_clean, None, 0.0)?;
    let u0 = DVector::zeros(p.operator.ncols());
    integrate_flow(&sys, schedule, &u0, grid, Some(&p.solution), opts)
}

fn measure_run(
    p: &ProblemInstance,
    sys: &NormalSystem,
    schedule: &EpsilonSchedule,
    rule: &RuleSpec,
    delta: f64,
    opts: &IntegrationOptions,
) -> Result<RunMeasurements> {
    let amplification = p.operator.norm_bound_sq().sqrt();
    let u0 = DVector::zeros(p.operator.ncols());

    // choose the stop, and obtain the clean trajectory that covers it
    let (stop, traj_clean) = match rule {
        RuleSpec::Oracle => {
            let stop = oracle_stop(spectral_decompose(sys), &p.solution, delta, schedule)?;
            let grid = record_grid(stop.t_stop)?;
            let clean = clean_flow(p, schedule, &grid, opts)?;
            (stop, clean)
        }
        RuleSpec::Apriori { a, r } => {
            let stop = apriori_stop(*a, *r, p.operator.norm_bound_sq(), delta, schedule)?;
            let grid = record_grid(stop.t_stop)?;
            let clean = clean_flow(p, schedule, &grid, opts)?;
            (stop, clean)
        }
        RuleSpec::Appendix => {
            // horizon: two decades past the time where the oracle level is
            // reached, so the grid sees the minimum before choosing it
            let (beta_ref, _) = minimize_h(spectral_decompose(sys), &p.solution, delta)?;
            let t_ref = schedule.invert(beta_ref)?;
            let horizon = (t_ref * APPENDIX_HORIZON_FACTOR).max(10.0);
            let grid = record_grid(horizon)?;
            let clean = clean_flow(p, schedule, &grid, opts)?;
            let stop = appendix_stop(&clean, delta, amplification)?;
            (stop, clean)
        }
    };

    // run the noisy flow to the chosen stop
    let grid = record_grid(stop.t_stop)?;
    let traj = integrate_flow(sys, schedule, &u0, &grid, Some(&p.solution), opts)?;
    let last = traj
        .points
        .last()
        .ok_or_else(|| DsmError::IntegratorFailure("no recorded points".into()))?;

    // the clean trajectory contains t_stop by construction on every path
    let clean_at_stop = traj_clean
        .points
        .iter()
        .find(|pt| pt.t == last.t)
        .ok_or_else(|| {
            DsmError::IntegratorFailure(format!(
                "clean trajectory does not contain the stop time {:.6e}",
                last.t
            ))
        })?;
    let a_clean = clean_at_stop
        .error
        .ok_or(DsmError::MissingErrorValues)?;
    let appendix_bound = amplification * delta / last.eps + a_clean;

    Ok(RunMeasurements {
        err_u: last.error.ok_or(DsmError::MissingErrorValues)?,
        err_w: last.comparison_error.ok_or(DsmError::MissingErrorValues)?,
        gap: last.tracking_gap,
        gronwall_bound: last.tracking_envelope,
        appendix_bound,
        stop,
    })
}

fn execute_run(
    p: &ProblemInstance,
    schedule_spec: &ScheduleSpec,
    rule: &RuleSpec,
    delta: f64,
    seed: u64,
    tol: f64,
) -> RunRecord {
    let start = Instant::now();
    let mut record = RunRecord {
        problem: p.name.clone(),
        schedule: schedule_spec.label(),
        rule: rule.label(),
        delta,
        seed,
        beta: None,
        t_stop: None,
        eta: None,
        err_u: None,
        err_w: None,
        gap: None,
        gronwall_bound: None,
        appendix_bound: None,
        eta_violated: false,
        status: "ok".to_string(),
        wall_time: 0.0,
    };

    let outcome = (|| -> Result<RunMeasurements> {
        // a fresh schedule per run: its quadrature cache is shared state
        // whose contents must not depend on sibling runs
        let schedule = schedule_spec.build()?;
        let f_noisy = add_noise(&p.f_clean, delta, seed)?;
        let sys = build_normal_system(&p.operator, &f_noisy, Some(&p.f_clean), delta)?;
        let opts = IntegrationOptions {
            rel_tol: tol,
            ..IntegrationOptions::default()
        };
        measure_run(p, &sys, &schedule, rule, delta, &opts)
    })();

    match outcome {
        Ok(m) => {
            record.beta = m.stop.beta;
            record.t_stop = Some(m.stop.t_stop);
            record.eta = Some(m.stop.eta);
            record.err_u = Some(m.err_u);
            record.err_w = Some(m.err_w);
            record.gap = Some(m.gap);
            record.gronwall_bound = Some(m.gronwall_bound);
            record.appendix_bound = Some(m.appendix_bound);
            if matches!(rule, RuleSpec::Oracle) {
                record.eta_violated = m.err_w > m.stop.eta * (1.0 + ETA_SLACK);
            }
        }
        Err(e) => {
            record.status = match skip_reason(&e) {
                Some(reason) => reason.to_string(),
                None => format!("error:{e}"),
            };
        }
    }
    record.wall_time = start.elapsed().as_secs_f64();
    record
}

/// Run the full sweep. Records come back in canonical configuration order
/// (problem, schedule, rule, delta, seed), whatever the execution order;
/// failures are recorded per run and never abort the sweep.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let problems: Vec<Result<ProblemInstance>> =
        config.problems.iter().map(build_problem).collect();

    struct Plan<'a> {
        problem: &'a Result<ProblemInstance>,
        problem_spec: &'a ProblemSpec,
        schedule: &'a ScheduleSpec,
        rule: &'a RuleSpec,
        delta: f64,
        seed: u64,
    }
    let mut plans = Vec::new();
    for (p, spec) in problems.iter().zip(&config.problems) {
        for schedule in &config.schedules {
            for rule in &config.rules {
                for &delta in &config.deltas {
                    for &seed in &config.seeds {
                        plans.push(Plan {
                            problem: p,
                            problem_spec: spec,
                            schedule,
                            rule,
                            delta,
                            seed,
                        });
                    }
                }
            }
        }
    }

    let records: Vec<RunRecord> = plans
        .par_iter()
        .map(|plan| match plan.problem {
            Ok(p) => execute_run(p, plan.schedule, plan.rule, plan.delta, plan.seed, config.integrator_tol),
            Err(e) => RunRecord {
                problem: format!("{:?}", plan.problem_spec),
                schedule: plan.schedule.label(),
                rule: plan.rule.label(),
                delta: plan.delta,
                seed: plan.seed,
                beta: None,
                t_stop: None,
                eta: None,
                err_u: None,
                err_w: None,
                gap: None,
                gronwall_bound: None,
                appendix_bound: None,
                eta_violated: false,
                status: format!("error:{e}"),
                wall_time: 0.0,
            },
        })
        .collect();

    let rates = compute_rates(&records);
    Ok(ExperimentOutcome { records, rates })
}

// ---------------------------------------------------------------------------
// Rate fitting
// ---------------------------------------------------------------------------

/// Least-squares slope of log(err) against log(delta), with its standard
/// error. Needs at least three points and strictly positive coordinates.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(DsmError::InvalidArgument(format!(
            "rate fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if !points
        .iter()
        .all(|(d, e)| *d > 0.0 && *e > 0.0 && d.is_finite() && e.is_finite())
    {
        return Err(DsmError::InvalidArgument(
            "rate fit needs positive finite points".into(),
        ));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(d, _)| d.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    if sxx == 0.0 {
        return Err(DsmError::InvalidArgument(
            "rate fit needs at least two distinct noise levels".into(),
        ));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let dof = (points.len() - 2) as f64;
    let stderr = (sse / dof / sxx).max(0.0).sqrt();
    Ok((slope, stderr))
}

/// Group successful records by (problem, rule) in first-appearance order
/// and fit a rate wherever at least three usable points exist.
pub fn compute_rates(records: &[RunRecord]) -> Vec<RateFit> {
    let mut groups: Vec<((String, String), Vec<(f64, f64)>)> = Vec::new();
    for r in records {
        if !r.is_ok() {
            continue;
        }
        let Some(err_u) = r.err_u else { continue };
        if !(err_u > 0.0 && err_u.is_finite()) {
            continue;
        }
        let key = (r.problem.clone(), r.rule.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((r.delta, err_u)),
            None => groups.push((key, vec![(r.delta, err_u)])),
        }
    }
    groups
        .into_iter()
        .filter_map(|((problem, rule), pts)| {
            let (slope, stderr) = fit_rate(&pts).ok()?;
            Some(RateFit {
                problem,
                rule,
                slope,
                stderr,
                n_points: pts.len(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// Quote a CSV field only when it contains a delimiter, quote, or newline.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_full(x: Option<f64>) -> String {
    x.map(format_full).unwrap_or_default()
}

/// Fixed header of `runs.csv`.
pub const RUNS_CSV_HEADER: &str =
    "problem,schedule,rule,delta,seed,beta,t_stop,eta,err_u,err_w,gap,gronwall_bound,appendix_bound,eta_violated,status";

/// Write the per-run table; all numbers carry 17 significant digits and
/// lines end in `\n`.
pub fn write_runs_csv<W: Write>(mut w: W, records: &[RunRecord]) -> Result<()> {
    writeln!(w, "{RUNS_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.problem),
            csv_field(&r.schedule),
            csv_field(&r.rule),
            format_full(r.delta),
            r.seed,
            opt_full(r.beta),
            opt_full(r.t_stop),
            opt_full(r.eta),
            opt_full(r.err_u),
            opt_full(r.err_w),
            opt_full(r.gap),
            opt_full(r.gronwall_bound),
            opt_full(r.appendix_bound),
            r.eta_violated,
            csv_field(&r.status),
        )?;
    }
    Ok(())
}

/// Fixed header of `rates.csv`.
pub const RATES_CSV_HEADER: &str = "problem,rule,slope,stderr,n_points";

/// Write the fitted-rate table.
pub fn write_rates_csv<W: Write>(mut w: W, rates: &[RateFit]) -> Result<()> {
    writeln!(w, "{RATES_CSV_HEADER}")?;
    for r in rates {
        writeln!(
            w,
            "{},{},{},{},{}",
            csv_field(&r.problem),
            csv_field(&r.rule),
            format_full(r.slope),
            format_full(r.stderr),
            r.n_points,
        )?;
    }
    Ok(())
}

/// Write per-run wall times; this file is intentionally outside the
/// determinism contract.
pub fn write_timings_csv<W: Write>(mut w: W, records: &[RunRecord]) -> Result<()> {
    writeln!(w, "problem,schedule,rule,delta,seed,wall_time_s")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{:.6e}",
            csv_field(&r.problem),
            csv_field(&r.schedule),
            csv_field(&r.rule),
            format_full(r.delta),
            r.seed,
            r.wall_time,
        )?;
    }
    Ok(())
}

/// Write `runs.csv`, `rates.csv`, and `timings.csv` into a directory,
/// creating it if needed.
pub fn write_outputs(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let runs = std::fs::File::create(dir.join("runs.csv"))?;
    write_runs_csv(std::io::BufWriter::new(runs), &outcome.records)?;
    let rates = std::fs::File::create(dir.join("rates.csv"))?;
    write_rates_csv(std::io::BufWriter::new(rates), &outcome.rates)?;
    let timings = std::fs::File::create(dir.join("timings.csv"))?;
    write_timings_csv(std::io::BufWriter::new(timings), &outcome.records)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn config_tokens_parse_exactly_as_documented() {
        let text = r#"{
            "problems": [
                {"kind": "hilbert", "n": 8, "target": "smooth"},
                {"kind": "hilbert", "n": 8, "target": {"source": {"a": 0.5}}},
                {"kind": "gravity", "n": 32},
                {"kind": "deriv2", "n": 32, "target": {"source": {"a": 1.0}}},
                {"kind": "deriv2", "n": 16}
            ],
            "schedules": [
                {"kind": "log"},
                {"kind": "loglog"},
                {"kind": "power", "p": 0.5, "eps0": 1.0},
                {"kind": "generator", "c": 1.0, "h": "paper_loglog"}
            ],
            "rules": [
                {"rule": "oracle"},
                {"rule": "apriori", "a": 1.0, "R": 1.0},
                {"rule": "appendix"}
            ],
            "deltas": [1e-2, 1e-3],
            "integrator_tol": 1e-8,
            "seeds": [1, 2],
            "output_dir": "out"
        }"#;
        let config = parse_config(text).unwrap();
        assert_eq!(config.problems.len(), 5);
        assert_eq!(
            config.problems[3],
            ProblemSpec::Deriv2 {
                n: 32,
                target: Some(TargetSpec::Source { a: 1.0 })
            }
        );
        assert_eq!(
            config.problems[0],
            ProblemSpec::Hilbert {
                n: 8,
                target: TargetSpec::Smooth
            }
        );
        assert_eq!(
            config.problems[1],
            ProblemSpec::Hilbert {
                n: 8,
                target: TargetSpec::Source { a: 0.5 }
            }
        );
        assert_eq!(config.schedules.len(), 4);
        assert_eq!(
            config.rules[1],
            RuleSpec::Apriori { a: 1.0, r: 1.0 }
        );
        // a round trip through serde preserves the config
        let again: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&config).unwrap()).unwrap();
        assert_eq!(again, config);
        // target defaults to smooth when omitted
        let c2 = parse_config(&text.replace(r#", "target": "smooth""#, "")).unwrap();
        assert_eq!(c2.problems[0], config.problems[0]);
    }

    #[test]
    fn config_validation_rejects_structural_defects() {
        let good = r#"{
            "problems": [{"kind": "hilbert", "n": 4}],
            "schedules": [{"kind": "log"}],
            "rules": [{"rule": "oracle"}],
            "deltas": [1e-2, 1e-3],
            "integrator_tol": 1e-8,
            "seeds": [1],
            "output_dir": "out"
        }"#;
        assert!(parse_config(good).is_ok());
        for (from, to) in [
            (r#""deltas": [1e-2, 1e-3]"#, r#""deltas": []"#),
            (r#""deltas": [1e-2, 1e-3]"#, r#""deltas": [1e-3, 1e-2]"#),
            (r#""deltas": [1e-2, 1e-3]"#, r#""deltas": [1e-2, -1e-3]"#),
            (r#""deltas": [1e-2, 1e-3]"#, r#""deltas": [1e-2, 1e-2]"#),
            (r#""integrator_tol": 1e-8"#, r#""integrator_tol": 0.0"#),
            (r#""seeds": [1]"#, r#""seeds": []"#),
            (r#""problems": [{"kind": "hilbert", "n": 4}]"#, r#""problems": []"#),
        ] {
            let bad = good.replace(from, to);
            assert!(parse_config(&bad).is_err(), "accepted {to}");
        }
        // unknown fields are refused
        assert!(parse_config(&good.replace(
            r#""output_dir": "out""#,
            r#""output_dir": "out", "extra": 1"#
        ))
        .is_err());
    }

    #[test]
    fn problem_labels_distinguish_targets() {
        let smooth = build_problem(&ProblemSpec::Hilbert {
            n: 8,
            target: TargetSpec::Smooth,
        })
        .unwrap();
        assert_eq!(smooth.name, "hilbert-8");
        let d2 = build_problem(&ProblemSpec::Deriv2 {
            n: 16,
            target: Some(TargetSpec::Source { a: 1.0 }),
        })
        .unwrap();
        assert_eq!(d2.name, "deriv2-16-src1");
        assert_relative_eq!(d2.solution.norm(), 1.0, max_relative = 1e-12);
        let ones = build_problem(&ProblemSpec::Hilbert {
            n: 8,
            target: TargetSpec::Ones,
        })
        .unwrap();
        assert_eq!(ones.name, "hilbert-8-ones");
        let src = build_problem(&ProblemSpec::Hilbert {
            n: 8,
            target: TargetSpec::Source { a: 0.5 },
        })
        .unwrap();
        assert_eq!(src.name, "hilbert-8-src0.5");
        assert_relative_eq!(src.solution.norm(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn fit_rate_recovers_an_exact_power_law() {
        let points: Vec<(f64, f64)> = (1..=6)
            .map(|k| {
                let d = 10f64.powi(-k);
                (d, 3.0 * d.powf(0.6))
            })
            .collect();
        let (slope, stderr) = fit_rate(&points).unwrap();
        assert_relative_eq!(slope, 0.6, max_relative = 1e-12);
        assert!(stderr <= 1e-10);
    }

    #[test]
    fn fit_rate_tolerates_bounded_perturbations() {
        let points: Vec<(f64, f64)> = (1..=8)
            .map(|k| {
                let d = 10f64.powi(-k);
                let wobble = if k % 2 == 0 { 1.05 } else { 0.95 };
                (d, d.powf(0.5) * wobble)
            })
            .collect();
        let (slope, stderr) = fit_rate(&points).unwrap();
        assert!((slope - 0.5).abs() < 0.05, "slope {slope}");
        assert!(stderr > 0.0);
    }

    #[test]
    fn fit_rate_rejects_degenerate_input() {
        assert!(fit_rate(&[(1e-2, 1.0), (1e-3, 0.5)]).is_err());
        assert!(fit_rate(&[(1e-2, 1.0), (1e-3, 0.5), (1e-4, 0.0)]).is_err());
        assert!(fit_rate(&[(1e-2, 1.0), (-1e-3, 0.5), (1e-4, 0.2)]).is_err());
        // all deltas identical: slope undefined
        assert!(fit_rate(&[(1e-2, 1.0), (1e-2, 0.5), (1e-2, 0.2)]).is_err());
    }

    fn sample_record() -> RunRecord {
        RunRecord {
            problem: "hilbert-8".to_string(),
            schedule: "power(p=0.5,eps0=1)".to_string(),
            rule: "oracle".to_string(),
            delta: 1e-3,
            seed: 7,
            beta: Some(0.25),
            t_stop: Some(16.0),
            eta: Some(0.5),
            err_u: Some(0.25),
            err_w: Some(0.125),
            gap: Some(0.0625),
            gronwall_bound: Some(0.09375),
            appendix_bound: Some(0.75),
            eta_violated: false,
            status: "ok".to_string(),
            wall_time: 0.125,
        }
    }

    #[test]
    fn runs_csv_layout_is_pinned() {
        let ok = sample_record();
        let mut skipped = sample_record();
        skipped.beta = None;
        skipped.t_stop = None;
        skipped.eta = None;
        skipped.err_u = None;
        skipped.err_w = None;
        skipped.gap = None;
        skipped.gronwall_bound = None;
        skipped.appendix_bound = None;
        skipped.status = "skipped:level-above-start".to_string();
        let mut buf = Vec::new();
        write_runs_csv(&mut buf, &[ok, skipped]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RUNS_CSV_HEADER);
        assert_eq!(
            lines[1],
            "hilbert-8,\"power(p=0.5,eps0=1)\",oracle,\
             1.0000000000000000e-3,7,2.5000000000000000e-1,\
             1.6000000000000000e1,5.0000000000000000e-1,\
             2.5000000000000000e-1,1.2500000000000000e-1,\
             6.2500000000000000e-2,9.3750000000000000e-2,\
             7.5000000000000000e-1,false,ok"
        );
        assert_eq!(
            lines[2],
            "hilbert-8,\"power(p=0.5,eps0=1)\",oracle,\
             1.0000000000000000e-3,7,,,,,,,,,false,skipped:level-above-start"
        );
        assert!(text.ends_with('\n') && !text.contains('\r'));
    }

    #[test]
    fn rates_csv_layout_is_pinned() {
        let fit = RateFit {
            problem: "hilbert-8".to_string(),
            rule: "apriori(a=1)".to_string(),
            slope: 0.5,
            stderr: 0.0625,
            n_points: 4,
        };
        let mut buf = Vec::new();
        write_rates_csv(&mut buf, &[fit]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "problem,rule,slope,stderr,n_points\n\
             hilbert-8,apriori(a=1),5.0000000000000000e-1,6.2500000000000000e-2,4\n"
        );
    }

    #[test]
    fn compute_rates_uses_only_successful_rows() {
        let mut records = Vec::new();
        for (k, d) in [1e-1, 1e-2, 1e-3, 1e-4].iter().enumerate() {
            let mut r = sample_record();
            r.delta = *d;
            r.err_u = Some(0.5 * d.powf(0.5));
            if k == 3 {
                r.status = "skipped:level-unreachable".to_string();
                r.err_u = None;
            }
            records.push(r);
        }
        // a second rule with too few points for a fit
        let mut other = sample_record();
        other.rule = "appendix".to_string();
        records.push(other);
        let rates = compute_rates(&records);
        assert_eq!(rates.len(), 1);
        assert_eq!(rates[0].problem, "hilbert-8");
        assert_eq!(rates[0].rule, "oracle");
        assert_eq!(rates[0].n_points, 3);
        assert_relative_eq!(rates[0].slope, 0.5, max_relative = 1e-10);
    }

    fn mini_config() -> ExperimentConfig {
        ExperimentConfig {
            problems: vec![ProblemSpec::Hilbert {
                n: 8,
                target: TargetSpec::Smooth,
            }],
            schedules: vec![ScheduleSpec::Power { p: 0.5, eps0: 1.0 }],
            rules: vec![
                RuleSpec::Oracle,
                RuleSpec::Apriori { a: 1.0, r: 1.0 },
                RuleSpec::Appendix,
            ],
            deltas: vec![1e-1, 1e-2, 1e-3],
            integrator_tol: 1e-8,
            seeds: vec![7],
            output_dir: "out".to_string(),
        }
    }

    #[test]
    fn mini_sweep_produces_contained_bounds_and_rates() {
        let outcome = run_experiment(&mini_config()).unwrap();
        assert_eq!(outcome.records.len(), 9);
        for r in &outcome.records {
            assert!(r.is_ok(), "run failed: {} {} {}", r.rule, r.delta, r.status);
            assert!(!r.eta_violated, "eta violated: {} {}", r.rule, r.delta);
            let eta = r.eta.unwrap();
            assert!(eta > 0.0);
            if r.rule == "oracle" {
                assert!(r.err_w.unwrap() <= eta * (1.0 + ETA_SLACK));
                assert!(r.beta.is_some());
            }
            if r.rule == "appendix" {
                assert!(r.beta.is_none());
            }
            // the recorded gap never exceeds its certified envelope by more
            // than integration slack
            let gap = r.gap.unwrap();
            let bound = r.gronwall_bound.unwrap();
            assert!(
                gap <= bound * (1.0 + 1e-6) + 1e-7,
                "gap {gap:.3e} above bound {bound:.3e}"
            );
        }
        // one rate fit per rule, each with all three noise levels
        assert_eq!(outcome.rates.len(), 3);
        for fit in &outcome.rates {
            assert_eq!(fit.n_points, 3);
            assert!(
                fit.slope > 0.05 && fit.slope < 1.2,
                "implausible slope {} for {}",
                fit.slope,
                fit.rule
            );
        }
    }

    #[test]
    fn sweeps_are_deterministic_across_thread_counts() {
        let config = mini_config();
        let render = |outcome: &ExperimentOutcome| -> String {
            let mut runs = Vec::new();
            write_runs_csv(&mut runs, &outcome.records).unwrap();
            let mut rates = Vec::new();
            write_rates_csv(&mut rates, &outcome.rates).unwrap();
            String::from_utf8(runs).unwrap() + &String::from_utf8(rates).unwrap()
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_experiment(&config).unwrap());
        let quad = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| run_experiment(&config).unwrap());
        assert_eq!(render(&single), render(&quad));
    }

    #[test]
    fn unreachable_levels_become_skips_not_failures() {
        let mut config = mini_config();
        // a schedule starting far below every sensible level
        config.schedules = vec![ScheduleSpec::Power { p: 0.5, eps0: 1e-9 }];
        config.rules = vec![RuleSpec::Oracle];
        config.deltas = vec![1e-1];
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.records.len(), 1);
        assert_eq!(outcome.records[0].status, "skipped:level-above-start");
        assert!(outcome.records[0].beta.is_none());
        assert!(outcome.rates.is_empty());
    }
}

