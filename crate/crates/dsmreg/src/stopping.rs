//! Rules that choose the readout level beta and time t from the noise level:
//! a spectral oracle that minimizes the exact error split, a closed-form
//! a-priori rule under a source condition, and a grid rule that minimizes a
//! noise-amplification-plus-error functional along a recorded clean
//! trajectory.

use nalgebra::DVector;

use crate::error::{DsmError, Result};
use crate::operator::SpectralDecomposition;
use crate::schedule::EpsilonSchedule;
use crate::solver::Trajectory;

/// Lower edge of the beta search bracket, as a fraction of ||B||; below
/// this, regularization changes nothing at machine precision.
const BRACKET_FLOOR: f64 = 1e-14;

/// Relative width in beta at which the golden-section refinement stops.
const REFINE_REL: f64 = 1e-6;

/// Diagnostics from a rule's search.
#[derive(Debug, Clone, Default)]
pub struct SearchDetails {
    /// Bracket in beta (or in time for grid rules) that the search covered.
    pub bracket: (f64, f64),
    pub iterations: usize,
}

/// Outcome of a stopping rule.
#[derive(Debug, Clone)]
pub struct StoppingResult {
    /// Rule label, e.g. "oracle", "apriori(a=1)", "appendix".
    pub rule: String,
    /// Chosen regularization level; grid rules report the schedule level at
    /// the chosen time instead, and leave this empty.
    pub beta: Option<f64>,
    /// Chosen readout time.
    pub t_stop: f64,
    /// Predicted error bound at the stop.
    pub eta: f64,
    pub details: SearchDetails,
}

/// Spectral error functional phi(beta, y) = beta ||(B + beta I)^{-1} y||,
/// evaluated as a sum over the eigenpairs of B.
pub fn phi(decomp: &SpectralDecomposition, y: &DVector<f64>, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(DsmError::InvalidArgument(format!(
            "level must be positive and finite, got {beta}"
        )));
    }
    if y.len() != decomp.eigenvalues().len() {
        return Err(DsmError::DimensionMismatch(format!(
            "vector has length {}, decomposition has dimension {}",
            y.len(),
            decomp.eigenvalues().len()
        )));
    }
    let coeffs = decomp.coefficients(y);
    let sum: f64 = coeffs
        .iter()
        .zip(decomp.eigenvalues().iter())
        .map(|(c, l)| {
            let r = c / (l + beta);
            r * r
        })
        .sum();
    Ok(beta * sum.sqrt())
}

fn h_value(decomp: &SpectralDecomposition, y: &DVector<f64>, delta: f64, beta: f64) -> Result<f64> {
    Ok(phi(decomp, y, beta)? + delta / (2.0 * beta.sqrt()))
}

fn minimize_h_with_details(
    decomp: &SpectralDecomposition,
    y: &DVector<f64>,
    delta: f64,
) -> Result<(f64, f64, SearchDetails)> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(DsmError::InvalidArgument(format!(
            "noise level must be positive and finite, got {delta}"
        )));
    }
    if y.norm() == 0.0 {
        // phi vanishes identically and the minimizer escapes to infinity
        return Err(DsmError::DegenerateTarget);
    }
    let b_norm = decomp.b_norm();
    if !(b_norm > 0.0) {
        return Err(DsmError::InvalidArgument("operator norm is zero".into()));
    }
    let (lo, hi) = (BRACKET_FLOOR * b_norm, b_norm);
    let (log_lo, log_hi) = (lo.ln(), hi.ln());

    // coarse scan dense enough that the global minimum cannot hide between
    // neighbors; ties keep the smaller beta
    let coarse = 241usize;
    let mut best_k = 0usize;
    let mut best_v = f64::INFINITY;
    let mut evals = 0usize;
    for k in 0..coarse {
        let lb = log_lo + (log_hi - log_lo) * k as f64 / (coarse - 1) as f64;
        let v = h_value(decomp, y, delta, lb.exp())?;
        evals += 1;
        if v < best_v {
            best_v = v;
            best_k = k;
        }
    }
    let cell = (log_hi - log_lo) / (coarse - 1) as f64;
    let mut a = log_lo + cell * best_k.saturating_sub(1) as f64;
    let mut b = (log_lo + cell * (best_k + 1) as f64).min(log_hi);

    // golden-section refinement on log beta; equal values shrink from the
    // right so plateaus resolve to the smallest minimizer
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = h_value(decomp, y, delta, c.exp())?;
    let mut fd = h_value(decomp, y, delta, d.exp())?;
    let mut iters = 0usize;
    while b - a > REFINE_REL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = h_value(decomp, y, delta, c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = h_value(decomp, y, delta, d.exp())?;
        }
        iters += 1;
        evals += 1;
    }
    let beta = if fc <= fd { c.exp() } else { d.exp() };
    let eta = h_value(decomp, y, delta, beta)?;
    Ok((
        beta,
        eta,
        SearchDetails {
            bracket: (lo, hi),
            iterations: evals + iters,
        },
    ))
}

/// Minimize h(beta) = phi(beta, y) + delta / (2 sqrt(beta)) over the bracket
/// [1e-14 ||B||, ||B||], returning the minimizing beta and the minimum eta.
///
/// A dense logarithmic scan locates the basin and golden-section refines it
/// to 1e-6 relative in beta; plateaus resolve to the smallest minimizer.
pub fn minimize_h(
    decomp: &SpectralDecomposition,
    y: &DVector<f64>,
    delta: f64,
) -> Result<(f64, f64)> {
    minimize_h_with_details(decomp, y, delta).map(|(b, e, _)| (b, e))
}

/// Spectral-oracle rule: beta minimizes the exact error split for the known
/// target y, and the stop time is where the schedule reaches beta.
pub fn oracle_stop(
    decomp: &SpectralDecomposition,
    y: &DVector<f64>,
    delta: f64,
    schedule: &EpsilonSchedule,
) -> Result<StoppingResult> {
    let (beta, eta, details) = minimize_h_with_details(decomp, y, delta)?;
    let t_stop = schedule.invert(beta)?;
    Ok(StoppingResult {
        rule: "oracle".to_string(),
        beta: Some(beta),
        t_stop,
        eta,
        details,
    })
}

/// A-priori rule under a source condition of order `a` with bound R, using
/// the operator norm bound m = ||A||^2.
///
/// For a >= 1 the split delta/(2 sqrt(eps)) + eps m^{a-1} R minimizes in
/// closed form at beta = (delta / (4 m^{a-1} R))^{2/3}. For 0 < a < 1 the
/// spectral majorant phi(eps) <= eps^a R max(1, m^{a-1}) gives
/// beta = (delta / (4 a R))^{2/(2a+1)}; the predicted bound then scales as
/// delta^{2a/(2a+1)}.
pub fn apriori_stop(
    a: f64,
    r: f64,
    m: f64,
    delta: f64,
    schedule: &EpsilonSchedule,
) -> Result<StoppingResult> {
    for (name, v) in [("source order", a), ("source bound", r), ("norm bound", m), ("noise level", delta)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(DsmError::InvalidArgument(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    let (beta, eta) = if a >= 1.0 {
        let scale = m.powf(a - 1.0) * r;
        let beta = (delta / (4.0 * scale)).powf(2.0 / 3.0);
        (beta, delta / (2.0 * beta.sqrt()) + beta * scale)
    } else {
        let beta = (delta / (4.0 * a * r)).powf(2.0 / (2.0 * a + 1.0));
        let majorant = r * m.powf(a - 1.0).max(1.0);
        (beta, delta / (2.0 * beta.sqrt()) + beta.powf(a) * majorant)
    };
    let t_stop = schedule.invert(beta)?;
    Ok(StoppingResult {
        rule: format!("apriori(a={a})"),
        beta: Some(beta),
        t_stop,
        eta,
        details: SearchDetails {
            bracket: (beta, beta),
            iterations: 0,
        },
    })
}

/// Grid rule on a recorded clean trajectory: the smallest recorded time
/// minimizing c delta / eps(t) + a(t), where a(t) is the recorded error and
/// c = sqrt(m). The minimum value mu bounds the error of the noisy flow at
/// the same time started from the same point.
pub fn appendix_stop(traj: &Trajectory, delta: f64, c: f64) -> Result<StoppingResult> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(DsmError::InvalidArgument(format!(
            "noise level must be finite and >= 0, got {delta}"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(DsmError::InvalidArgument(format!(
            "amplification constant must be positive and finite, got {c}"
        )));
    }
    if traj.points.is_empty() {
        return Err(DsmError::InvalidArgument("empty trajectory".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for pt in &traj.points {
        let err = pt.error.ok_or(DsmError::MissingErrorValues)?;
        let objective = c * delta / pt.eps + err;
        // strict improvement only: ties resolve to the earliest time
        if best.map_or(true, |(_, v)| objective < v) {
            best = Some((pt.t, objective));
        }
    }
    let (t_stop, eta) = best.expect("nonempty trajectory always yields a minimizer");
    Ok(StoppingResult {
        rule: "appendix".to_string(),
        beta: None,
        t_stop,
        eta,
        details: SearchDetails {
            bracket: (traj.points[0].t, traj.points.last().unwrap().t),
            iterations: traj.points.len(),
        },
    })
}
