//! Adaptive Gauss-Kronrod quadrature with a checkpoint cache for running
//! integrals of the form t -> integral of f over [0, t].

use std::collections::BTreeMap;
use std::sync::Mutex;

/// 7-point Gauss / 15-point Kronrod nodes on [-1, 1], nonnegative half.
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.000000000000000,
];

const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];

const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

/// One 15-point Kronrod panel over [a, b]; returns (integral, error estimate).
fn kronrod_panel(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut result_gauss = WG[3] * fc;
    let mut result_kronrod = WGK[7] * fc;
    for j in 0..7 {
        let x = half * XGK[j];
        let f1 = f(center - x);
        let f2 = f(center + x);
        result_kronrod += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            result_gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let integral = result_kronrod * half;
    let err = ((result_kronrod - result_gauss) * half).abs();
    (integral, err)
}

/// Hard cap on adaptive subdivisions for a single integral.
const MAX_PANELS: usize = 20_000;

struct Panel {
    err: f64,
    lo: f64,
    hi: f64,
    est: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err.to_bits() == other.err.to_bits()
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Adaptive quadrature to a relative tolerance with an absolute floor.
///
/// Greedy refinement: the panel with the largest error estimate is bisected
/// until the summed error meets the target. Panels narrower than a few ulps
/// are accepted as they stand, so the routine always terminates.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64, abs_floor: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let f_ref: &dyn Fn(f64) -> f64 = &f;
    let (est, err) = kronrod_panel(f_ref, a, b);
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(Panel { err, lo: a, hi: b, est });
    let mut total = est;
    let mut total_err = err;
    let mut settled = 0.0f64;
    for _ in 0..MAX_PANELS {
        if total_err <= rel_tol * total.abs() + abs_floor {
            break;
        }
        let Some(p) = heap.pop() else { break };
        let width_floor = (p.lo.abs() + p.hi.abs()) * f64::EPSILON * 4.0 + f64::MIN_POSITIVE;
        if (p.hi - p.lo).abs() <= width_floor {
            // as narrow as floating point allows; stop charging its error
            total_err -= p.err;
            settled += p.est;
            continue;
        }
        let mid = 0.5 * (p.lo + p.hi);
        let (il, el) = kronrod_panel(f_ref, p.lo, mid);
        let (ir, er) = kronrod_panel(f_ref, mid, p.hi);
        total += il + ir - p.est;
        total_err += el + er - p.err;
        heap.push(Panel { err: el, lo: p.lo, hi: mid, est: il });
        heap.push(Panel { err: er, lo: mid, hi: p.hi, est: ir });
    }
    // final sum over the partition, small panels first for accuracy
    let mut parts: Vec<f64> = heap.iter().map(|p| p.est).collect();
    parts.push(settled);
    parts.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    parts.iter().sum()
}

/// Cache of running-integral values keyed by the upper limit.
///
/// Keys are the IEEE bit patterns of nonnegative upper limits, so the map
/// order matches numeric order. A query integrates only from the nearest
/// cached checkpoint below it.
pub struct RunningIntegral {
    checkpoints: Mutex<BTreeMap<u64, f64>>,
    rel_tol: f64,
}

impl RunningIntegral {
    pub fn new(rel_tol: f64) -> Self {
        let mut map = BTreeMap::new();
        map.insert(0f64.to_bits(), 0.0);
        RunningIntegral {
            checkpoints: Mutex::new(map),
            rel_tol,
        }
    }

    /// Value of the running integral of `f` at `t >= 0`.
    pub fn eval(&self, f: impl Fn(f64) -> f64, t: f64) -> f64 {
        assert!(t >= 0.0 && t.is_finite(), "running integral needs finite t >= 0");
        let key = t.to_bits();
        let (base_t, base_v) = {
            let map = self.checkpoints.lock().unwrap();
            if let Some(v) = map.get(&key) {
                return *v;
            }
            let (k, v) = map.range(..=key).next_back().map(|(k, v)| (*k, *v)).unwrap_or((0, 0.0));
            (f64::from_bits(k), v)
        };
        let segment = integrate(&f, base_t, t, self.rel_tol, f64::MIN_POSITIVE);
        let value = base_v + segment;
        self.checkpoints.lock().unwrap().insert(key, value);
        value
    }
}
