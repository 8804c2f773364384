//! File exchange: matrices and vectors as column-major CSV or JSON objects,
//! trajectory exports with a work-counter sidecar, and self-contained
//! problem archives.
//!
//! Numbers are written with 17 significant digits so every `f64` round-trips
//! exactly, and lines always end in `\n`. The matrix CSV layout is a
//! `rows,cols` header followed by one value per line in column-major order;
//! a vector is one value per line with no header. The JSON form is the
//! object `{"rows": r, "cols": c, "data": [...]}` with `data` again in
//! column-major order. All readers reject non-finite entries.

use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::operator::DenseOperator;
use crate::problems::ProblemInstance;
use crate::solver::{IntegratorStats, Trajectory};

/// Render one number for any file this module writes: 17 significant
/// digits, enough to reproduce the exact bits on read-back.
pub fn format_full(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_value(token: &str, context: &str) -> Result<f64> {
    let v: f64 = token.trim().parse().map_err(|_| DsmError::Parse {
        context: context.to_string(),
        message: format!("not a number: {token:?}"),
    })?;
    if !v.is_finite() {
        return Err(DsmError::NonFinite(format!(
            "{context}: non-finite value {token:?}"
        )));
    }
    Ok(v)
}

fn json_error(context: &str, e: serde_json::Error) -> DsmError {
    DsmError::Parse {
        context: context.to_string(),
        message: e.to_string(),
    }
}

fn check_dims(rows: usize, cols: usize, context: &str) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(DsmError::Parse {
            context: context.to_string(),
            message: format!("dimensions must be positive, got {rows}x{cols}"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Write a matrix as a `rows,cols` header line followed by one entry per
/// line in column-major order.
pub fn write_matrix_csv<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    check_dims(m.nrows(), m.ncols(), "matrix csv")?;
    writeln!(w, "{},{}", m.nrows(), m.ncols())?;
    for v in m.iter() {
        writeln!(w, "{}", format_full(*v))?;
    }
    Ok(())
}

/// Read a matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv<R: BufRead>(r: R) -> Result<DMatrix<f64>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| DsmError::Parse {
            context: "matrix csv".to_string(),
            message: "empty input".to_string(),
        })?
        .map_err(DsmError::Io)?;
    let dims: Vec<&str> = header.trim().split(',').collect();
    if dims.len() != 2 {
        return Err(DsmError::Parse {
            context: "matrix csv".to_string(),
            message: format!("header must be rows,cols, got {header:?}"),
        });
    }
    let parse_dim = |s: &str| -> Result<usize> {
        s.trim().parse().map_err(|_| DsmError::Parse {
            context: "matrix csv".to_string(),
            message: format!("bad dimension {s:?}"),
        })
    };
    let rows = parse_dim(dims[0])?;
    let cols = parse_dim(dims[1])?;
    check_dims(rows, cols, "matrix csv")?;
    let mut data = Vec::with_capacity(rows * cols);
    for (k, line) in lines.enumerate() {
        let line = line.map_err(DsmError::Io)?;
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        if data.len() == rows * cols {
            return Err(DsmError::Parse {
                context: "matrix csv".to_string(),
                message: format!("extra data at line {}", k + 2),
            });
        }
        data.push(parse_value(token, &format!("matrix csv line {}", k + 2))?);
    }
    if data.len() != rows * cols {
        return Err(DsmError::Parse {
            context: "matrix csv".to_string(),
            message: format!(
                "expected {} entries for {rows}x{cols}, found {}",
                rows * cols,
                data.len()
            ),
        });
    }
    Ok(DMatrix::from_column_slice(rows, cols, &data))
}

/// Write a vector as one entry per line.
pub fn write_vector_csv<W: Write>(mut w: W, v: &DVector<f64>) -> Result<()> {
    if v.is_empty() {
        return Err(DsmError::Parse {
            context: "vector csv".to_string(),
            message: "refusing to write an empty vector".to_string(),
        });
    }
    for x in v.iter() {
        writeln!(w, "{}", format_full(*x))?;
    }
    Ok(())
}

/// Read a vector written by [`write_vector_csv`].
pub fn read_vector_csv<R: BufRead>(r: R) -> Result<DVector<f64>> {
    let mut data = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line.map_err(DsmError::Io)?;
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        data.push(parse_value(token, &format!("vector csv line {}", k + 1))?);
    }
    if data.is_empty() {
        return Err(DsmError::Parse {
            context: "vector csv".to_string(),
            message: "empty input".to_string(),
        });
    }
    Ok(DVector::from_vec(data))
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

/// JSON exchange object for matrices and vectors; `data` is column-major,
/// and a vector is the `cols == 1` case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        MatrixJson {
            rows: v.len(),
            cols: 1,
            data: v.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        check_dims(self.rows, self.cols, "matrix json")?;
        if self.data.len() != self.rows * self.cols {
            return Err(DsmError::Parse {
                context: "matrix json".to_string(),
                message: format!(
                    "data length {} does not match {}x{}",
                    self.data.len(),
                    self.rows,
                    self.cols
                ),
            });
        }
        if let Some(bad) = self.data.iter().find(|x| !x.is_finite()) {
            return Err(DsmError::NonFinite(format!(
                "matrix json: non-finite entry {bad}"
            )));
        }
        Ok(DMatrix::from_column_slice(self.rows, self.cols, &self.data))
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        if self.cols != 1 {
            return Err(DsmError::Parse {
                context: "vector json".to_string(),
                message: format!("expected a single column, got {}", self.cols),
            });
        }
        let m = self.to_matrix()?;
        Ok(DVector::from_column_slice(m.as_slice()))
    }
}

/// Write a matrix as the JSON object `{"rows", "cols", "data"}`.
pub fn write_matrix_json<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    check_dims(m.nrows(), m.ncols(), "matrix json")?;
    serde_json::to_writer(&mut w, &MatrixJson::from_matrix(m))
        .map_err(|e| json_error("matrix json", e))?;
    writeln!(w)?;
    Ok(())
}

/// Read a matrix written by [`write_matrix_json`].
pub fn read_matrix_json<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let parsed: MatrixJson =
        serde_json::from_reader(r).map_err(|e| json_error("matrix json", e))?;
    parsed.to_matrix()
}

/// Read a vector (a single-column matrix object) from JSON.
pub fn read_vector_json<R: Read>(r: R) -> Result<DVector<f64>> {
    let parsed: MatrixJson =
        serde_json::from_reader(r).map_err(|e| json_error("vector json", e))?;
    parsed.to_vector()
}

// ---------------------------------------------------------------------------
// Trajectory export
// ---------------------------------------------------------------------------

/// Write a recorded trajectory as CSV with columns
/// `t,eps,g,gronwall_bound,err`; the `err` field is empty when the true
/// solution was unknown to the integration.
pub fn write_trajectory_csv<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    writeln!(w, "t,eps,g,gronwall_bound,err")?;
    for p in &traj.points {
        let err = p.error.map(format_full).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            format_full(p.t),
            format_full(p.eps),
            format_full(p.tracking_gap),
            format_full(p.tracking_envelope),
            err
        )?;
    }
    Ok(())
}

/// Write the integration work counters as a JSON sidecar.
pub fn write_integrator_stats_json<W: Write>(mut w: W, stats: &IntegratorStats) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, stats).map_err(|e| json_error("integrator stats", e))?;
    writeln!(w)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Problem archives
// ---------------------------------------------------------------------------

/// Self-contained serialized problem: the operator in the matrix JSON
/// format, the exact solution and clean data, and identifying metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemArchive {
    pub label: String,
    pub n: usize,
    pub delta: f64,
    pub seed: u64,
    pub kind: String,
    pub matrix: MatrixJson,
    pub norm_bound_sq: f64,
    pub solution: Vec<f64>,
    pub f_clean: Vec<f64>,
}

impl ProblemArchive {
    /// Capture a problem instance together with the noise parameters that
    /// accompany it (`delta = 0` for a clean instance).
    pub fn from_instance(p: &ProblemInstance, delta: f64, seed: u64) -> Self {
        let kind = p
            .name
            .split_once('-')
            .map(|(k, _)| k.to_string())
            .unwrap_or_else(|| p.name.clone());
        ProblemArchive {
            label: p.name.clone(),
            n: p.operator.ncols(),
            delta,
            seed,
            kind,
            matrix: MatrixJson::from_matrix(p.operator.entries()),
            norm_bound_sq: p.operator.norm_bound_sq(),
            solution: p.solution.iter().copied().collect(),
            f_clean: p.f_clean.iter().copied().collect(),
        }
    }

    /// Rebuild the problem instance, re-validating the operator.
    pub fn to_instance(&self) -> Result<ProblemInstance> {
        let entries = self.matrix.to_matrix()?;
        if entries.ncols() != self.n {
            return Err(DsmError::Parse {
                context: "problem archive".to_string(),
                message: format!(
                    "metadata says n = {}, matrix has {} columns",
                    self.n,
                    entries.ncols()
                ),
            });
        }
        let operator = DenseOperator::with_norm_bound(entries, self.norm_bound_sq)?;
        for (name, v) in [("solution", &self.solution), ("f_clean", &self.f_clean)] {
            if v.len() != if name == "solution" { operator.ncols() } else { operator.nrows() } {
                return Err(DsmError::DimensionMismatch(format!(
                    "problem archive: {name} has length {}",
                    v.len()
                )));
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(DsmError::NonFinite(format!(
                    "problem archive: non-finite {name} entry {bad}"
                )));
            }
        }
        Ok(ProblemInstance {
            name: self.label.clone(),
            operator,
            solution: DVector::from_column_slice(&self.solution),
            f_clean: DVector::from_column_slice(&self.f_clean),
        })
    }
}

/// Write a problem archive as pretty-printed JSON.
pub fn write_problem_json<W: Write>(mut w: W, archive: &ProblemArchive) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, archive).map_err(|e| json_error("problem archive", e))?;
    writeln!(w)?;
    Ok(())
}

/// Read a problem archive written by [`write_problem_json`].
pub fn read_problem_json<R: Read>(r: R) -> Result<ProblemArchive> {
    serde_json::from_reader(r).map_err(|e| json_error("problem archive", e))
}
