//! Regularization schedules: positive decreasing functions eps(t) together
//! with their derivative, running integral, certification checks, and
//! inversion t(eps).
//!
//! A schedule is admissible when eps > 0, eps decays to zero, the integral
//! of eps diverges, and |eps'| / eps^{5/2} tends to zero. The generator form
//! eps(t) = [c + integral of h over [0,t]]^{-2/3} satisfies
//! |eps'| / eps^{5/2} = (2/3) h(t) by construction.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::quadrature::{integrate, RunningIntegral};

/// Relative tolerance for the running integrals behind `primitive` and the
/// generator form.
const QUAD_REL_TOL: f64 = 1e-11;

/// Relative tolerance for `invert`.
const INVERT_REL_TOL: f64 = 1e-10;

type RateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

enum Form {
    /// eps(t) = 1 / ln(t + 2)
    Log,
    /// eps(t) = (1 + ln ln(t + 2))^{-2/3}
    LogLog,
    /// eps(t) = eps0 * (1 + t)^{-p}, 0 < p < 2/3
    Power { eps0: f64, p: f64 },
    /// eps(t) = (c + integral of h over [0, t])^{-2/3}
    Generator {
        c: f64,
        h: RateFn,
        h_label: String,
        h_integral: Arc<RunningIntegral>,
    },
    /// Arbitrary eval/deriv pair; certification decides whether it is usable.
    Custom { eval: RateFn, deriv: RateFn },
}

/// A time-dependent regularization level.
#[derive(Clone)]
pub struct EpsilonSchedule {
    form: Arc<Form>,
    primitive_cache: Arc<RunningIntegral>,
}

impl fmt::Debug for EpsilonSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EpsilonSchedule({})", self.label())
    }
}

impl EpsilonSchedule {
    fn from_form(form: Form) -> Self {
        EpsilonSchedule {
            form: Arc::new(form),
            primitive_cache: Arc::new(RunningIntegral::new(QUAD_REL_TOL)),
        }
    }

    pub fn log() -> Self {
        Self::from_form(Form::Log)
    }

    pub fn loglog() -> Self {
        Self::from_form(Form::LogLog)
    }

    /// Power decay; `p` must lie in (0, 2/3) so the decay-ratio condition
    /// |eps'| / eps^{5/2} -> 0 holds.
    pub fn power(eps0: f64, p: f64) -> Result<Self> {
        if !eps0.is_finite() || eps0 <= 0.0 {
            return Err(DsmError::InvalidSchedule(format!(
                "power schedule needs eps0 > 0, got {eps0}"
            )));
        }
        if !p.is_finite() || p <= 0.0 || p >= 2.0 / 3.0 {
            return Err(DsmError::InvalidSchedule(format!(
                "power schedule needs p in (0, 2/3), got {p}"
            )));
        }
        Ok(Self::from_form(Form::Power { eps0, p }))
    }

    /// Build eps(t) = (c + integral of h)^{-2/3} from a nonnegative rate
    /// function. The inner integral is evaluated adaptively and cached.
    pub fn from_generator(
        c: f64,
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        h_label: impl Into<String>,
    ) -> Result<Self> {
        if !c.is_finite() || c <= 0.0 {
            return Err(DsmError::InvalidSchedule(format!(
                "generator schedule needs c > 0, got {c}"
            )));
        }
        Ok(Self::from_form(Form::Generator {
            c,
            h: Arc::new(h),
            h_label: h_label.into(),
            h_integral: Arc::new(RunningIntegral::new(QUAD_REL_TOL)),
        }))
    }

    /// Escape hatch for schedules given directly by closures. `validate`
    /// decides whether such a schedule is admissible.
    pub fn from_closures(
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::from_form(Form::Custom {
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
        })
    }

    /// Regularization level at time `t >= 0`.
    pub fn eval(&self, t: f64) -> f64 {
        match &*self.form {
            Form::Log => 1.0 / (t + 2.0).ln(),
            Form::LogLog => (1.0 + (t + 2.0).ln().ln()).powf(-2.0 / 3.0),
            Form::Power { eps0, p } => eps0 * (1.0 + t).powf(-p),
            Form::Generator { c, h, h_integral, .. } => {
                let ht = h_integral.eval(|s| h(s), t);
                (c + ht).powf(-2.0 / 3.0)
            }
            Form::Custom { eval, .. } => eval(t),
        }
    }

    /// Time derivative of the level.
    pub fn deriv(&self, t: f64) -> f64 {
        match &*self.form {
            Form::Log => {
                let l = (t + 2.0).ln();
                -1.0 / ((t + 2.0) * l * l)
            }
            Form::LogLog => {
                let l = (t + 2.0).ln();
                -(2.0 / 3.0) * (1.0 + l.ln()).powf(-5.0 / 3.0) / ((t + 2.0) * l)
            }
            Form::Power { eps0, p } => -eps0 * p * (1.0 + t).powf(-p - 1.0),
            Form::Generator { c, h, h_integral, .. } => {
                let ht = h_integral.eval(|s| h(s), t);
                -(2.0 / 3.0) * h(t) * (c + ht).powf(-5.0 / 3.0)
            }
            Form::Custom { deriv, .. } => deriv(t),
        }
    }

    /// Running integral of the level over [0, t]. Analytic for the power
    /// form, cached adaptive quadrature otherwise.
    pub fn primitive(&self, t: f64) -> f64 {
        match &*self.form {
            Form::Power { eps0, p } => {
                let q = 1.0 - p;
                eps0 * ((1.0 + t).powf(q) - 1.0) / q
            }
            _ => self.primitive_cache.eval(|s| self.eval(s), t),
        }
    }

    /// Integral of the level over [a, b], computed locally so that small
    /// differences of a large running integral never cancel.
    pub fn primitive_between(&self, a: f64, b: f64) -> f64 {
        match &*self.form {
            Form::Power { eps0, p } => {
                let q = 1.0 - p;
                // stable for b close to a only when the powf difference is
                // well scaled; fall back to quadrature in that regime
                let d = eps0 * ((1.0 + b).powf(q) - (1.0 + a).powf(q)) / q;
                if d > 1e-6 * eps0 * (1.0 + b).powf(q) {
                    d
                } else {
                    integrate(|s| self.eval(s), a, b, QUAD_REL_TOL, f64::MIN_POSITIVE)
                }
            }
            _ => integrate(|s| self.eval(s), a, b, QUAD_REL_TOL, f64::MIN_POSITIVE),
        }
    }

    /// Short display label.
    pub fn label(&self) -> String {
        match &*self.form {
            Form::Log => "log".to_string(),
            Form::LogLog => "loglog".to_string(),
            Form::Power { eps0, p } => format!("power(p={p},eps0={eps0})"),
            Form::Generator { c, h_label, .. } => format!("generator({h_label},c={c})"),
            Form::Custom { .. } => "custom".to_string(),
        }
    }

    /// True for the generator form, where an informational rate witness is
    /// reported by `validate`.
    fn generator_rate(&self) -> Option<&RateFn> {
        match &*self.form {
            Form::Generator { h, .. } => Some(h),
            _ => None,
        }
    }

    /// Finite-grid certification of the admissibility conditions.
    ///
    /// The grid is {0} plus `n_samples` log-spaced points on [0.01, t_max].
    /// Certification demands positivity, monotone decay, decay towards zero,
    /// a vanishing trend of |eps'| / eps^{5/2}, and divergence of the running
    /// integral. For generator schedules the report also carries an
    /// informational witness for the decay of the rate function itself; it
    /// never affects certification.
    pub fn validate(&self, t_max: f64, n_samples: usize) -> Result<CertificationReport> {
        if !(t_max.is_finite() && t_max >= 100.0) {
            return Err(DsmError::InvalidArgument(format!(
                "certification horizon must be >= 100, got {t_max}"
            )));
        }
        if n_samples < 64 {
            return Err(DsmError::InvalidArgument(format!(
                "certification needs at least 64 samples, got {n_samples}"
            )));
        }

        let t_lo: f64 = 0.01;
        let span = (t_max / t_lo).log10();
        let mut grid = Vec::with_capacity(n_samples + 1);
        grid.push(0.0);
        for k in 0..n_samples {
            let frac = k as f64 / (n_samples - 1) as f64;
            grid.push(t_lo * 10f64.powf(frac * span));
        }

        let eps: Vec<f64> = grid.iter().map(|&t| self.eval(t)).collect();
        let ratio: Vec<f64> = grid
            .iter()
            .zip(&eps)
            .map(|(&t, &e)| self.deriv(t).abs() / e.powf(2.5))
            .collect();

        let positive = eps.iter().all(|&e| e.is_finite() && e > 0.0);
        let nonincreasing = eps
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        let decays_to_zero = positive && eps[grid.len() - 1] <= 0.75 * eps[0];

        let decade_mean = |lo: f64, hi: f64| -> f64 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (t, r) in grid.iter().zip(&ratio) {
                if *t >= lo && *t <= hi * (1.0 + 1e-12) {
                    sum += r;
                    n += 1;
                }
            }
            if n == 0 { f64::NAN } else { sum / n as f64 }
        };
        let ratio_first_decade = decade_mean(t_lo, t_lo * 10.0);
        let ratio_last_decade = decade_mean(t_max / 10.0, t_max);
        let ratio_vanishes = ratio.iter().all(|r| r.is_finite())
            && ratio_last_decade <= 0.5 * ratio_first_decade + f64::MIN_POSITIVE;

        let primitive_at_tmax = self.primitive(t_max);
        let primitive_at_tenth = self.primitive(t_max / 10.0);
        let integral_diverges = primitive_at_tmax >= 1.5 * primitive_at_tenth;

        let generator_rate_vanishes = self.generator_rate().map(|h| {
            h(t_max) <= 0.5 * h(t_lo) + f64::MIN_POSITIVE
        });

        Ok(CertificationReport {
            positive,
            nonincreasing,
            decays_to_zero,
            ratio_vanishes,
            integral_diverges,
            min_eps: eps.iter().cloned().fold(f64::INFINITY, f64::min),
            ratio_first_decade,
            ratio_last_decade,
            primitive_at_tmax,
            primitive_at_tenth,
            generator_rate_vanishes,
            t_max,
            samples: n_samples,
        })
    }

    /// Smallest t with eval(t) = beta, by bisection on a geometrically grown
    /// bracket. Requires 0 < beta <= eval(0).
    pub fn invert(&self, beta: f64) -> Result<f64> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(DsmError::InvalidArgument(format!(
                "invert needs a positive finite level, got {beta}"
            )));
        }
        let e0 = self.eval(0.0);
        if beta > e0 * (1.0 + 1e-12) {
            return Err(DsmError::LevelAboveStart { beta, eps0: e0 });
        }
        if beta >= e0 {
            return Ok(0.0);
        }
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        while self.eval(hi) > beta {
            lo = hi;
            hi *= 4.0;
            if hi > 1e300 {
                return Err(DsmError::LevelUnreachable { beta });
            }
        }
        for _ in 0..400 {
            if hi - lo <= INVERT_REL_TOL * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) > beta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Outcome of the finite-grid certification in `EpsilonSchedule::validate`.
#[derive(Debug, Clone)]
pub struct CertificationReport {
    pub positive: bool,
    pub nonincreasing: bool,
    pub decays_to_zero: bool,
    pub ratio_vanishes: bool,
    pub integral_diverges: bool,
    pub min_eps: f64,
    pub ratio_first_decade: f64,
    pub ratio_last_decade: f64,
    pub primitive_at_tmax: f64,
    pub primitive_at_tenth: f64,
    /// Informational, generator schedules only; never gates certification.
    pub generator_rate_vanishes: Option<bool>,
    pub t_max: f64,
    pub samples: usize,
}

impl CertificationReport {
    pub fn certified(&self) -> bool {
        self.positive
            && self.nonincreasing
            && self.decays_to_zero
            && self.ratio_vanishes
            && self.integral_diverges
    }
}

impl fmt::Display for CertificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "certified: {}", self.certified())?;
        writeln!(f, "  positive:          {}", self.positive)?;
        writeln!(f, "  nonincreasing:     {}", self.nonincreasing)?;
        writeln!(f, "  decays to zero:    {}", self.decays_to_zero)?;
        writeln!(
            f,
            "  decay ratio trend: {} (first decade {:.6e}, last decade {:.6e})",
            self.ratio_vanishes, self.ratio_first_decade, self.ratio_last_decade
        )?;
        writeln!(
            f,
            "  integral diverges: {} (P({:.3e}) = {:.6e}, P({:.3e}) = {:.6e})",
            self.integral_diverges,
            self.t_max,
            self.primitive_at_tmax,
            self.t_max / 10.0,
            self.primitive_at_tenth
        )?;
        if let Some(v) = self.generator_rate_vanishes {
            writeln!(f, "  rate fn decays:    {v} (informational)")?;
        }
        write!(
            f,
            "  grid: {} samples up to t = {:.3e}, min eps = {:.6e}",
            self.samples, self.t_max, self.min_eps
        )
    }
}

/// Serializable schedule description used by configs and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    Log,
    #[serde(rename = "loglog")]
    LogLog,
    Power { p: f64, eps0: f64 },
    Generator { c: f64, h: String },
}

impl ScheduleSpec {
    /// Construct the schedule this spec describes. The only accepted name
    /// for a generator rate function is `"paper_loglog"`.
    pub fn build(&self) -> Result<EpsilonSchedule> {
        match self {
            ScheduleSpec::Log => Ok(EpsilonSchedule::log()),
            ScheduleSpec::LogLog => Ok(EpsilonSchedule::loglog()),
            ScheduleSpec::Power { p, eps0 } => EpsilonSchedule::power(*eps0, *p),
            ScheduleSpec::Generator { c, h } => match h.as_str() {
                "paper_loglog" => EpsilonSchedule::from_generator(
                    *c,
                    |s: f64| 1.0 / ((2.0 + s) * (2.0 + s).ln()),
                    h.clone(),
                ),
                other => Err(DsmError::InvalidSchedule(format!(
                    "unknown generator rate function '{other}'"
                ))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            ScheduleSpec::Log => "log".into(),
            ScheduleSpec::LogLog => "loglog".into(),
            ScheduleSpec::Power { p, eps0 } => format!("power(p={p},eps0={eps0})"),
            ScheduleSpec::Generator { c, h } => format!("generator({h},c={c})"),
        }
    }
}
