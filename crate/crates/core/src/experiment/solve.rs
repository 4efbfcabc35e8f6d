use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig, SeedStream};
use super::metrics::write_json;
use crate::blockamc::{block_solve, partition_plan, SolveContext, SolveStatistics};
use crate::error::{Error, Result};
use crate::numeric::{condition_1, FixedPointSpec, Matrix};

/// Parses `rows cols` followed by `rows·cols` row-major decimals. Errors
/// carry the byte offset of the offending token.
pub fn parse_matrix_text(text: &str) -> Result<Matrix> {
    let mut tokens = text
        .split_ascii_whitespace()
        .map(|t| (t.as_ptr() as usize - text.as_ptr() as usize, t));
    let mut dim = |what: &str| -> Result<usize> {
        let (off, tok) = tokens.next().ok_or_else(|| Error::Parse {
            offset: text.len(),
            msg: format!("missing {what}"),
        })?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Parse {
                offset: off,
                msg: format!("{what} must be a positive integer, got {tok:?}"),
            }),
        }
    };
    let rows = dim("row count")?;
    let cols = dim("column count")?;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Parse {
        offset: 0,
        msg: "matrix size overflows".into(),
    })?;
    let mut data = Vec::with_capacity(n.min(1 << 20));
    for (off, tok) in tokens {
        if data.len() == n {
            return Err(Error::Parse {
                offset: off,
                msg: format!("more than {n} values"),
            });
        }
        let v: f64 = tok.parse().map_err(|_| Error::Parse {
            offset: off,
            msg: format!("not a number: {tok:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                offset: off,
                msg: format!("non-finite value {tok:?}"),
            });
        }
        data.push(v);
    }
    if data.len() != n {
        return Err(Error::Parse {
            offset: text.len(),
            msg: format!("expected {n} values, found {}", data.len()),
        });
    }
    Matrix::new(rows, cols, data)
}

pub fn format_matrix_text(m: &Matrix) -> String {
    let mut s = format!("{} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub size: usize,
    pub rhs_columns: usize,
    pub total_bits: u32,
    /// Refinement tolerance `2^-(bits-1)`.
    pub tolerance: f64,
    pub condition_1: f64,
    /// `‖AX − B‖_F / ‖B‖_F` evaluated in f64.
    pub relative_residual: f64,
    /// `tolerance · condition_1`, the expected residual scale.
    pub residual_bound: f64,
    pub partition: String,
    pub counters: SolveStatistics,
}

/// Solves `A X = B` through the analog pipeline.
pub fn solve_system(a: &Matrix, b: &Matrix, bits: u32, cfg: &ExperimentConfig) -> Result<(Matrix, SolveReport)> {
    if !a.is_square() {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("matrix must be square, got {}x{}", a.rows(), a.cols()),
        });
    }
    if b.rows() != a.rows() {
        return Err(Error::dims("solve", format!("{} right-hand-side rows", a.rows()), b.rows()));
    }
    let precision = FixedPointSpec::new(bits)?;
    let solver = cfg.solver_config(precision)?;
    let mut ctx = SolveContext::new(solver, derive_seed(cfg.train.seed, SeedStream::Device));
    let x = block_solve(a, b, &mut ctx)?;
    let residual = a.matmul(&x)?.sub(b)?;
    let b_norm = b.frobenius_norm();
    let condition = condition_1(a);
    let report = SolveReport {
        size: a.rows(),
        rhs_columns: b.cols(),
        total_bits: bits,
        tolerance: precision.tolerance(),
        condition_1: condition,
        relative_residual: if b_norm == 0.0 {
            residual.frobenius_norm()
        } else {
            residual.frobenius_norm() / b_norm
        },
        residual_bound: precision.tolerance() * condition,
        partition: partition_plan(a.rows(), cfg.device.leaf_max).to_string(),
        counters: ctx.statistics().clone(),
    };
    Ok((x, report))
}

fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_text(&text)
}

/// Reads matrix and right-hand-side files, solves, and writes
/// `solution.txt` and `solve_report.json` into `out_dir`.
pub fn run_solve(
    matrix_path: &Path,
    rhs_path: &Path,
    bits: u32,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<SolveReport> {
    let a = read_matrix(matrix_path)?;
    let b = read_matrix(rhs_path)?;
    let (x, report) = solve_system(&a, &b, bits, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sol = out_dir.join("solution.txt");
    std::fs::write(&sol, format_matrix_text(&x)).map_err(|e| Error::io(&sol, e))?;
    write_json(&report, &out_dir.join("solve_report.json"))?;
    Ok(report)
}
