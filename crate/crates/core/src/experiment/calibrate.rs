use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, version_string, ExperimentConfig, OptimizerKind, SeedStream};
use super::metrics::write_json;
use super::train::{load_datasets, Datasets};
use crate::blockamc::{block_solve, LeafSample, LinearSolver, SolveContext};
use crate::error::{Error, Result};
use crate::kfac::kfac_step;
use crate::nn::Model;
use crate::numeric::{solve_dense, Matrix};

pub const MIN_TRIALS: usize = 100;
/// Digital training epochs used to harvest factor matrices.
pub const WORKLOAD_EPOCHS: usize = 10;

/// A linear system the optimizer asked to solve.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadProblem {
    pub a: Matrix,
    pub b: Matrix,
}

/// Solves exactly and keeps a copy of every system it sees.
#[derive(Debug, Default)]
pub struct RecordingSolver {
    pub problems: Vec<WorkloadProblem>,
}

impl LinearSolver for RecordingSolver {
    fn solve(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        self.problems.push(WorkloadProblem { a: a.clone(), b: b.clone() });
        solve_dense(a, b)
    }
}

/// The damped-factor systems met during a short exact-KFAC run.
pub fn harvest_workload(cfg: &ExperimentConfig, data: &Datasets, epochs: usize) -> Result<Vec<WorkloadProblem>> {
    let mut model = Model::init(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, SeedStream::Init)));
    let mut recorder = RecordingSolver::default();
    let bs = cfg.train.batch_size;
    for _ in 0..epochs {
        let idx: Vec<usize> = (0..data.train.len()).collect();
        for chunk in idx.chunks(bs) {
            let batch = data.train.select(chunk);
            kfac_step(&mut model, &batch.images, &batch.labels, &cfg.kfac, &mut recorder)?;
        }
    }
    Ok(recorder.problems)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let pct = |p: f64| v[((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Some(Distribution {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p10: pct(0.10),
            p50: pct(0.50),
            p90: pct(0.90),
            p99: pct(0.99),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub version: String,
    pub config_sha256: String,
    pub total_bits: u32,
    /// Leaf refinements observed.
    pub trials: usize,
    pub converged_fraction: f64,
    /// Relative error of the first analog solve of each refinement.
    pub one_shot_error: Option<Distribution>,
    /// Relative error of every analog solve, all iterations pooled.
    pub all_lp_error: Option<Distribution>,
    pub iterations: Option<Distribution>,
    /// Error of converged refinements against an exact solve.
    pub converged_error: Option<Distribution>,
    pub workload_problems: usize,
    pub failed_block_solves: usize,
}

impl CalibrationReport {
    pub fn from_samples(cfg: &ExperimentConfig, bits: u32, samples: &[LeafSample], problems: usize, failed: usize) -> Self {
        let one_shot: Vec<f64> = samples.iter().filter_map(|s| s.lp_errors.first().copied()).collect();
        let pooled: Vec<f64> = samples.iter().flat_map(|s| s.lp_errors.iter().copied()).collect();
        let iters: Vec<f64> = samples.iter().map(|s| s.iterations as f64).collect();
        let conv_err: Vec<f64> = samples.iter().filter(|s| s.converged).map(|s| s.final_error).collect();
        let converged = samples.iter().filter(|s| s.converged).count();
        CalibrationReport {
            version: version_string(),
            config_sha256: cfg.sha256(),
            total_bits: bits,
            trials: samples.len(),
            converged_fraction: if samples.is_empty() {
                0.0
            } else {
                converged as f64 / samples.len() as f64
            },
            one_shot_error: Distribution::of(&one_shot),
            all_lp_error: Distribution::of(&pooled),
            iterations: Distribution::of(&iters),
            converged_error: Distribution::of(&conv_err),
            workload_problems: problems,
            failed_block_solves: failed,
        }
    }
}

/// Replays KFAC-workload systems through a traced analog context until at
/// least `trials` leaf refinements have been observed.
pub fn calibrate(cfg: &ExperimentConfig, data: &Datasets, trials: usize) -> Result<(CalibrationReport, Vec<LeafSample>)> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!("calibration needs at least {MIN_TRIALS} trials")));
    }
    let mut exact_cfg = cfg.clone();
    exact_cfg.train.optimizer = OptimizerKind::KfacExact;
    let problems = harvest_workload(&exact_cfg, data, WORKLOAD_EPOCHS)?;
    if problems.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let precision = cfg.train.precision_for_epoch(1)?;
    let solver = cfg.solver_config(precision)?;
    let mut ctx = SolveContext::new(solver, derive_seed(cfg.train.seed, SeedStream::Calibrate)).with_tracing(true);
    let mut failed = 0;
    let mut replayed = 0;
    while ctx.samples().len() < trials {
        let p = &problems[replayed % problems.len()];
        if block_solve(&p.a, &p.b, &mut ctx).is_err() {
            failed += 1;
        }
        replayed += 1;
    }
    let samples = ctx.take_samples();
    let report = CalibrationReport::from_samples(cfg, precision.total_bits(), &samples, replayed, failed);
    Ok((report, samples))
}

/// Loads data, calibrates, and writes `calibration.json` into `out_dir`.
pub fn run_calibrate(cfg: &ExperimentConfig, trials: usize, out_dir: &Path) -> Result<CalibrationReport> {
    let data = load_datasets(cfg)?;
    let (report, _) = calibrate(cfg, &data, trials)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&report, &out_dir.join("calibration.json"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_percentiles() {
        let v: Vec<f64> = (1..=101).map(f64::from).collect();
        let d = Distribution::of(&v).unwrap();
        assert_eq!((d.p10, d.p50, d.p90, d.max), (11.0, 51.0, 91.0, 101.0));
        assert_eq!(d.mean, 51.0);
        assert!(Distribution::of(&[f64::NAN]).is_none());
    }
}
