//! Dense injective operators A, the normal system B = A^T A with right-hand
//! side A^T f, its spectral decomposition, and regularized resolvent solves
//! (B + eps I)^{-1} v.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{DsmError, Result};

/// Relative slack accepted when validating a declared norm bound.
const NORM_BOUND_SLACK: f64 = 1e-10;

/// A dense matrix operator with certified singular-value information.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    entries: DMatrix<f64>,
    norm_bound_sq: f64,
    sigma_max: f64,
    sigma_min: f64,
}

fn require_finite_matrix(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DsmError::NonFinite(what.to_string()))
    }
}

fn require_finite_vector(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DsmError::NonFinite(what.to_string()))
    }
}

fn singular_extremes(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    let svd = SVD::try_new(m.clone(), false, false, f64::EPSILON, 0)
        .ok_or(DsmError::EigenFailure)?;
    let sv = &svd.singular_values;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &s in sv.iter() {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    Ok((hi, lo))
}

impl DenseOperator {
    /// Wrap a matrix, computing the tightest norm bound from its largest
    /// singular value. All singular values must be strictly positive.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        require_finite_matrix(&entries, "operator entries")?;
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(DsmError::DimensionMismatch("operator must be nonempty".into()));
        }
        if entries.nrows() < entries.ncols() {
            return Err(DsmError::DimensionMismatch(format!(
                "operator must have at least as many rows as columns, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let (sigma_max, sigma_min) = singular_extremes(&entries)?;
        if sigma_min <= 0.0 {
            return Err(DsmError::NotInjective(sigma_min));
        }
        Ok(DenseOperator {
            entries,
            norm_bound_sq: sigma_max * sigma_max,
            sigma_max,
            sigma_min,
        })
    }

    /// Wrap a matrix with an explicitly declared squared norm bound m; the
    /// largest singular value must not exceed sqrt(m).
    pub fn with_norm_bound(entries: DMatrix<f64>, norm_bound_sq: f64) -> Result<Self> {
        let mut op = Self::new(entries)?;
        if !norm_bound_sq.is_finite() || norm_bound_sq <= 0.0 {
            return Err(DsmError::InvalidArgument(format!(
                "norm bound must be positive and finite, got {norm_bound_sq}"
            )));
        }
        if op.sigma_max > norm_bound_sq.sqrt() * (1.0 + NORM_BOUND_SLACK) {
            return Err(DsmError::NormBoundTooSmall {
                sigma_max: op.sigma_max,
                norm_bound_sq,
            });
        }
        op.norm_bound_sq = norm_bound_sq;
        Ok(op)
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Squared norm bound m with ||A||^2 <= m.
    pub fn norm_bound_sq(&self) -> f64 {
        self.norm_bound_sq
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn condition_number(&self) -> f64 {
        self.sigma_max / self.sigma_min
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.entries * v
    }

    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        self.entries.tr_mul(v)
    }
}

/// Eigendecomposition of the symmetric positive semidefinite B, eigenvalues
/// ascending and clamped at zero.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    fn compute(b: &DMatrix<f64>) -> Result<Self> {
        let eig = SymmetricEigen::try_new(b.clone(), f64::EPSILON, 0)
            .ok_or(DsmError::EigenFailure)?;
        let n = b.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let mut values = DVector::zeros(n);
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            values[dst] = eig.eigenvalues[src].max(0.0);
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok(SpectralDecomposition {
            eigenvalues: values,
            eigenvectors: vectors,
        })
    }

    /// Eigenvalues in ascending order, all >= 0.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Largest eigenvalue, the spectral norm of B.
    pub fn b_norm(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Coefficients of `v` in the eigenbasis.
    pub fn coefficients(&self, v: &DVector<f64>) -> DVector<f64> {
        self.eigenvectors.tr_mul(v)
    }

    /// Reassemble a vector from eigenbasis coefficients.
    pub fn from_coefficients(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.eigenvectors * c
    }
}

/// The normal system B u = A^T f together with the data norms needed by the
/// stopping rules. Immutable after construction; safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct NormalSystem {
    b_matrix: DMatrix<f64>,
    rhs: DVector<f64>,
    rhs_clean: Option<DVector<f64>>,
    data_norm: f64,
    noise_level: f64,
    norm_bound_sq: f64,
    spectral: SpectralDecomposition,
}

impl NormalSystem {
    pub fn b_matrix(&self) -> &DMatrix<f64> {
        &self.b_matrix
    }

    /// Right-hand side A^T f for the possibly noisy data f.
    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    /// Right-hand side A^T f for the clean data, when known.
    pub fn rhs_clean(&self) -> Option<&DVector<f64>> {
        self.rhs_clean.as_ref()
    }

    /// ||f|| of the data the system was built from.
    pub fn data_norm(&self) -> f64 {
        self.data_norm
    }

    pub fn noise_level(&self) -> f64 {
        self.noise_level
    }

    /// Squared norm bound m of the originating operator; ||B|| <= m.
    pub fn norm_bound_sq(&self) -> f64 {
        self.norm_bound_sq
    }

    /// Spectral norm of B.
    pub fn b_norm(&self) -> f64 {
        self.spectral.b_norm()
    }

    pub fn dim(&self) -> usize {
        self.b_matrix.nrows()
    }
}

/// Form B = A^T A and the right-hand side A^T f. When clean data accompanies
/// noisy data, the declared noise level must dominate their distance.
///
/// The spectral decomposition of B is computed here, once, and shared by all
/// later spectral evaluations.
pub fn build_normal_system(
    op: &DenseOperator,
    f_data: &DVector<f64>,
    f_clean: Option<&DVector<f64>>,
    noise_level: f64,
) -> Result<NormalSystem> {
    require_finite_vector(f_data, "data vector")?;
    if f_data.len() != op.nrows() {
        return Err(DsmError::DimensionMismatch(format!(
            "data has length {}, operator has {} rows",
            f_data.len(),
            op.nrows()
        )));
    }
    if !noise_level.is_finite() || noise_level < 0.0 {
        return Err(DsmError::InvalidArgument(format!(
            "noise level must be finite and >= 0, got {noise_level}"
        )));
    }
    if let Some(fc) = f_clean {
        require_finite_vector(fc, "clean data vector")?;
        if fc.len() != op.nrows() {
            return Err(DsmError::DimensionMismatch(format!(
                "clean data has length {}, operator has {} rows",
                fc.len(),
                op.nrows()
            )));
        }
        let observed = (f_data - fc).norm();
        // absolute slack for representation error: forming f + e and
        // subtracting f back loses ~sqrt(n) ulps of ||f||, which can exceed
        // any relative margin when delta << ||f||
        let slack = 32.0 * f64::EPSILON * fc.norm().max(f_data.norm());
        if observed > noise_level * (1.0 + 1e-12) + slack {
            return Err(DsmError::NoiseBoundViolated {
                observed,
                delta: noise_level,
            });
        }
    }
    let at = op.entries().transpose();
    let mut b = &at * op.entries();
    // kill rounding asymmetry so the symmetric eigensolver sees an exactly
    // symmetric matrix
    let bt = b.transpose();
    b += &bt;
    b *= 0.5;
    let spectral = SpectralDecomposition::compute(&b)?;
    Ok(NormalSystem {
        rhs: op.apply_transpose(f_data),
        rhs_clean: f_clean.map(|fc| op.apply_transpose(fc)),
        data_norm: f_data.norm(),
        noise_level,
        norm_bound_sq: op.norm_bound_sq(),
        b_matrix: b,
        spectral,
    })
}

/// Cached spectral decomposition of the system's B.
pub fn spectral_decompose(sys: &NormalSystem) -> &SpectralDecomposition {
    &sys.spectral
}

/// Apply (B + eps I)^{-1} to an arbitrary vector by symmetric factorization,
/// with one iterative-refinement pass to tighten the residual.
pub fn resolvent_apply(sys: &NormalSystem, v: &DVector<f64>, eps: f64) -> Result<DVector<f64>> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(DsmError::InvalidArgument(format!(
            "regularization level must be positive and finite, got {eps}"
        )));
    }
    if v.len() != sys.dim() {
        return Err(DsmError::DimensionMismatch(format!(
            "vector has length {}, system has dimension {}",
            v.len(),
            sys.dim()
        )));
    }
    let mut m = sys.b_matrix.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
    let chol = Cholesky::new(m.clone()).ok_or(DsmError::FactorizationFailure)?;
    let mut x = chol.solve(v);
    let r = v - &m * &x;
    x += chol.solve(&r);
    require_finite_vector(&x, "resolvent solution")?;
    Ok(x)
}

/// Regularized solution w = (B + eps I)^{-1} A^T f of the normal system.
pub fn tikhonov_solve(sys: &NormalSystem, eps: f64) -> Result<DVector<f64>> {
    resolvent_apply(sys, &sys.rhs, eps)
}

/// Residual of the resolvent commutation identity
/// A (A^T A + eps I)^{-1} A^T f = (A A^T + eps I)^{-1} A A^T f,
/// together with the half-power bound check
/// ||(A^T A + eps I)^{-1} A^T f|| <= ||f|| / (2 sqrt(eps)).
pub fn commutation_residual(op: &DenseOperator, f: &DVector<f64>, eps: f64) -> Result<(f64, bool)> {
    require_finite_vector(f, "data vector")?;
    if f.len() != op.nrows() {
        return Err(DsmError::DimensionMismatch(format!(
            "data has length {}, operator has {} rows",
            f.len(),
            op.nrows()
        )));
    }
    if !eps.is_finite() || eps <= 0.0 {
        return Err(DsmError::InvalidArgument(format!(
            "regularization level must be positive and finite, got {eps}"
        )));
    }
    let a = op.entries();
    let atf = op.apply_transpose(f);

    // column side: (A^T A + eps I)^{-1} A^T f
    let mut ata = a.tr_mul(a);
    for i in 0..ata.nrows() {
        ata[(i, i)] += eps;
    }
    let chol_c = Cholesky::new(ata.clone()).ok_or(DsmError::FactorizationFailure)?;
    let mut x = chol_c.solve(&atf);
    let rc = &atf - &ata * &x;
    x += chol_c.solve(&rc);

    // row side: (A A^T + eps I)^{-1} A A^T f
    let aatf = op.apply(&atf);
    let mut aat = a * a.transpose();
    for i in 0..aat.nrows() {
        aat[(i, i)] += eps;
    }
    let chol_r = Cholesky::new(aat.clone()).ok_or(DsmError::FactorizationFailure)?;
    let mut z = chol_r.solve(&aatf);
    let rr = &aatf - &aat * &z;
    z += chol_r.solve(&rr);

    let residual = (op.apply(&x) - z).norm();
    let half_power_ok = x.norm() <= f.norm() / (2.0 * eps.sqrt()) * (1.0 + 1e-10);
    Ok((residual, half_power_ok))
}
