//! Recursive block inversion for matrices larger than one crossbar.
//!
//! A matrix is halved (`⌈n/2⌉`, `⌊n/2⌋`) until every block fits the array.
//! Each node eliminates its leading block through a Schur complement formed
//! digitally; leaves are refined on a freshly programmed crossbar.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::device::{program_crossbar, split_and_scale};
use crate::error::{Error, Result};
use crate::hpinv::{hp_solve, hp_solve_traced, SolverConfig};
use crate::numeric::{condition_1, relative_error, solve_dense, Lu, Matrix, Vector};

/// Schur complements with a larger 1-norm condition estimate are rejected.
const SCHUR_MAX_CONDITION: f64 = 1e14;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PartitionTree {
    Leaf(usize),
    Node {
        size: usize,
        left: Box<PartitionTree>,
        right: Box<PartitionTree>,
    },
}

impl PartitionTree {
    pub fn size(&self) -> usize {
        match self {
            PartitionTree::Leaf(n) => *n,
            PartitionTree::Node { size, .. } => *size,
        }
    }

    /// Leaf sizes, left to right.
    pub fn leaves(&self) -> Vec<usize> {
        match self {
            PartitionTree::Leaf(n) => vec![*n],
            PartitionTree::Node { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            PartitionTree::Leaf(_) => 0,
            PartitionTree::Node { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

impl fmt::Display for PartitionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionTree::Leaf(n) => write!(f, "{n}"),
            PartitionTree::Node { size, left, right } => write!(f, "{size}({left},{right})"),
        }
    }
}

pub fn partition_plan(n: usize, leaf_max: usize) -> PartitionTree {
    assert!(n >= 1 && leaf_max >= 1, "partition sizes must be positive");
    if n <= leaf_max {
        return PartitionTree::Leaf(n);
    }
    let n1 = n.div_ceil(2);
    PartitionTree::Node {
        size: n,
        left: Box::new(partition_plan(n1, leaf_max)),
        right: Box::new(partition_plan(n - n1, leaf_max)),
    }
}

/// Counters accumulated across every solve issued through one context.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStatistics {
    /// `hp_solve` calls.
    pub leaf_solves: u64,
    /// Analog one-shot solves, including retries after clipping.
    pub lp_vector_outputs: u64,
    pub refinement_iterations_total: u64,
    pub crossbar_programs: u64,
    pub digital_scalar_solves: u64,
    pub saturations: u64,
    /// Crossbars re-programmed after a failed refinement.
    pub reprograms: u64,
    /// `hp_solve` calls keyed by fixed-point width.
    pub solves_by_bits: BTreeMap<u32, u64>,
}

impl SolveStatistics {
    pub fn mean_iterations(&self) -> f64 {
        if self.leaf_solves == 0 {
            0.0
        } else {
            self.refinement_iterations_total as f64 / self.leaf_solves as f64
        }
    }

    /// Counter increments since `earlier`.
    pub fn since(&self, earlier: &SolveStatistics) -> SolveStatistics {
        let mut by_bits = self.solves_by_bits.clone();
        for (bits, n) in &earlier.solves_by_bits {
            if let Some(v) = by_bits.get_mut(bits) {
                *v -= n;
            }
        }
        by_bits.retain(|_, v| *v > 0);
        SolveStatistics {
            leaf_solves: self.leaf_solves - earlier.leaf_solves,
            lp_vector_outputs: self.lp_vector_outputs - earlier.lp_vector_outputs,
            refinement_iterations_total: self.refinement_iterations_total - earlier.refinement_iterations_total,
            crossbar_programs: self.crossbar_programs - earlier.crossbar_programs,
            digital_scalar_solves: self.digital_scalar_solves - earlier.digital_scalar_solves,
            saturations: self.saturations - earlier.saturations,
            reprograms: self.reprograms - earlier.reprograms,
            solves_by_bits: by_bits,
        }
    }
}

/// Outcome of one traced leaf refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafSample {
    pub size: usize,
    pub iterations: usize,
    pub converged: bool,
    /// One-shot relative error of every analog solve in the refinement.
    pub lp_errors: Vec<f64>,
    /// Relative error of the refined solution against the exact digital solve.
    pub final_error: f64,
}

/// Anything that can solve `A X = B` for a square `A`.
pub trait LinearSolver {
    fn solve(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix>;
}

/// Dense digital LU solve in full host precision.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactSolver;

impl LinearSolver for ExactSolver {
    fn solve(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        solve_dense(a, b)
    }
}

/// Device, converter and precision settings plus the random source and
/// counters shared by every block solve issued through it.
#[derive(Clone, Debug)]
pub struct SolveContext {
    pub config: SolverConfig,
    rng: ChaCha8Rng,
    stats: SolveStatistics,
    trace: bool,
    samples: Vec<LeafSample>,
}

impl SolveContext {
    pub fn new(config: SolverConfig, seed: u64) -> Self {
        SolveContext {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: SolveStatistics::default(),
            trace: false,
            samples: Vec::new(),
        }
    }

    /// Record a [`LeafSample`] for every leaf refinement. Costs one extra
    /// digital solve per analog solve.
    pub fn with_tracing(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    pub fn statistics(&self) -> &SolveStatistics {
        &self.stats
    }

    pub fn samples(&self) -> &[LeafSample] {
        &self.samples
    }

    pub fn take_samples(&mut self) -> Vec<LeafSample> {
        std::mem::take(&mut self.samples)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn leaf(&mut self, a: &Matrix, b: &Matrix, path: &str) -> Result<Matrix> {
        let n = a.rows();
        let mut x = Matrix::zeros(n, b.cols());
        if n == 1 {
            let d = a[(0, 0)];
            if d == 0.0 {
                return Err(Error::SingularSchur { path: path.to_string() });
            }
            for j in 0..b.cols() {
                x[(0, j)] = b[(0, j)] / d;
            }
            self.stats.digital_scalar_solves += 1;
            return Ok(x);
        }

        let nonzero: Vec<usize> = (0..b.cols()).filter(|&j| !b.column(j).is_zero()).collect();
        if nonzero.is_empty() {
            return Ok(x);
        }
        let cfg = self.config.clone();
        let targets = split_and_scale(a, &cfg.device).map_err(|e| e.in_block(path))?;
        let mut state = program_crossbar(&targets, &cfg.device, &mut self.rng);
        self.stats.crossbar_programs += 1;
        let mut retries_left = cfg.reprogram_retries;
        let exact = if self.trace { Lu::factor(a) } else { None };

        for j in nonzero {
            let col = b.column(j);
            let (xj, report) = loop {
                let solved = if self.trace {
                    hp_solve_traced(a, &col, &state, &cfg, &mut self.rng)
                } else {
                    hp_solve(a, &col, &state, &cfg, &mut self.rng)
                };
                let e = match solved {
                    Ok(ok) => break ok,
                    Err(e) => e,
                };
                let (Error::NonConvergence { report } | Error::Divergence { report, .. }) = &e else {
                    return Err(e.in_block(path));
                };
                self.count(report.iterations, report.lp_outputs, report.saturations);
                if self.trace {
                    self.samples.push(LeafSample {
                        size: n,
                        iterations: report.iterations,
                        converged: false,
                        lp_errors: report.lp_errors.clone(),
                        final_error: f64::NAN,
                    });
                }
                if retries_left == 0 {
                    return Err(e.in_block(path));
                }
                // a fresh write-verify pass draws new device errors
                retries_left -= 1;
                state = program_crossbar(&targets, &cfg.device, &mut self.rng);
                self.stats.crossbar_programs += 1;
                self.stats.reprograms += 1;
            };
            self.count(report.iterations, report.lp_outputs, report.saturations);
            if let Some(lu) = &exact {
                let reference = lu.solve(&col);
                self.samples.push(LeafSample {
                    size: n,
                    iterations: report.iterations,
                    converged: report.converged,
                    lp_errors: report.lp_errors,
                    final_error: relative_error(&xj, &reference).unwrap_or(f64::NAN),
                });
            }
            x.set_column(j, &xj);
        }
        Ok(x)
    }

    fn count(&mut self, iterations: usize, lp_outputs: usize, saturations: usize) {
        self.stats.leaf_solves += 1;
        self.stats.refinement_iterations_total += iterations as u64;
        self.stats.lp_vector_outputs += lp_outputs as u64;
        self.stats.saturations += saturations as u64;
        *self
            .stats
            .solves_by_bits
            .entry(self.config.precision.total_bits())
            .or_default() += 1;
    }

    fn solve_node(&mut self, a: &Matrix, b: &Matrix, tree: &PartitionTree, path: &str) -> Result<Matrix> {
        let (left, right) = match tree {
            PartitionTree::Leaf(_) => return self.leaf(a, b, path),
            PartitionTree::Node { left, right, .. } => (left, right),
        };
        let n = a.rows();
        let n1 = left.size();
        let n2 = n - n1;
        let k = b.cols();

        let a11 = a.submatrix(0, 0, n1, n1);
        let a12 = a.submatrix(0, n1, n1, n2);
        let a21 = a.submatrix(n1, 0, n2, n1);
        let a22 = a.submatrix(n1, n1, n2, n2);
        let b1 = b.submatrix(0, 0, n1, k);
        let b2 = b.submatrix(n1, 0, n2, k);

        let w = self.solve_node(&a11, &b1.hstack(&a12)?, left, &format!("{path}.11"))?;
        let w_left = w.submatrix(0, 0, n1, k);
        let w_right = w.submatrix(0, k, n1, n2);

        let schur = a22.sub(&a21.matmul(&w_right)?)?;
        if condition_1(&schur) > SCHUR_MAX_CONDITION {
            return Err(Error::SingularSchur { path: path.to_string() });
        }
        let rhs2 = b2.sub(&a21.matmul(&w_left)?)?;
        let x2 = self.solve_node(&schur, &rhs2, right, &format!("{path}.S"))?;
        let x1 = w_left.sub(&w_right.matmul(&x2)?)?;
        x1.vstack(&x2)
    }
}

impl LinearSolver for SolveContext {
    fn solve(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        block_solve(a, b, self)
    }
}

/// Solves `A X = B` through the analog pipeline.
pub fn block_solve(a: &Matrix, b: &Matrix, ctx: &mut SolveContext) -> Result<Matrix> {
    if !a.is_square() || a.rows() != b.rows() {
        return Err(Error::dims(
            "block_solve",
            format!("{0}x{0} system", a.rows()),
            format!("{}x{} A, {}x{} B", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let tree = partition_plan(a.rows(), ctx.config.device.leaf_max);
    ctx.solve_node(a, b, &tree, "root")
}

/// `(G + βI)⁻¹ ∇W (A + αI)⁻¹` as two serial solves; the second acts on
/// the transpose so a left solve realizes right-multiplication.
pub fn precondition_update<S: LinearSolver + ?Sized>(
    grad_w: &Matrix,
    a_factor: &Matrix,
    g_factor: &Matrix,
    alpha: f64,
    beta: f64,
    solver: &mut S,
) -> Result<Matrix> {
    if g_factor.rows() != grad_w.rows() || a_factor.rows() != grad_w.cols() {
        return Err(Error::dims(
            "precondition_update",
            format!("{}x{} gradient", g_factor.rows(), a_factor.rows()),
            format!("{}x{}", grad_w.rows(), grad_w.cols()),
        ));
    }
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("damping must be nonnegative, got α={alpha}, β={beta}")));
    }
    let g_damped = g_factor.add_diagonal(beta);
    let u = solver.solve(&g_damped, grad_w).map_err(|e| Error::Stage {
        stage: "G",
        source: Box::new(e),
    })?;
    let a_damped = a_factor.add_diagonal(alpha);
    let v = solver.solve(&a_damped, &u.transpose()).map_err(|e| Error::Stage {
        stage: "A",
        source: Box::new(e),
    })?;
    Ok(v.transpose())
}

/// Solves a single right-hand side through any solver.
pub fn solve_vector<S: LinearSolver + ?Sized>(solver: &mut S, a: &Matrix, b: &Vector) -> Result<Vector> {
    Ok(solver.solve(a, &b.as_column())?.column(0))
}
