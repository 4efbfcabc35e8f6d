//! High-precision inversion by iterative refinement.
//!
//! The residual `b − A x` is formed digitally against the true matrix; each
//! correction comes from a one-shot analog solve on the programmed array.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{amc_solve_with_gain, ConverterConfig};
use crate::device::{CrossbarState, DeviceConfig};
use crate::error::{Error, Result};
use crate::numeric::{condition_1, mvm, relative_error, FixedPointSpec, Lu, Matrix, Vector};

pub const DEFAULT_MAX_ITERS: usize = 200;

/// Rising-residual streak that, together with [`DIVERGENCE_RATIO`], signals divergence.
pub const DIVERGENCE_STREAK: usize = 5;
pub const DIVERGENCE_RATIO: f64 = 10.0;

pub const DEFAULT_REPROGRAM_RETRIES: usize = 2;

/// Gain halvings tried when an analog solve clips before accepting the clipped output.
const MAX_GAIN_HALVINGS: u32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub device: DeviceConfig,
    pub converters: ConverterConfig,
    pub precision: FixedPointSpec,
    pub max_iters: usize,
    /// Times a leaf may re-program its crossbar after a failed refinement.
    pub reprogram_retries: usize,
}

impl SolverConfig {
    pub fn new(device: DeviceConfig, converters: ConverterConfig, precision: FixedPointSpec) -> Self {
        SolverConfig {
            device,
            converters,
            precision,
            max_iters: DEFAULT_MAX_ITERS,
            reprogram_retries: DEFAULT_REPROGRAM_RETRIES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.converters.validate()?;
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    /// Analog corrections applied.
    pub iterations: usize,
    /// `‖b − A x‖∞ / ‖b‖∞` after the last correction.
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Analog solves issued, counting retries after clipping.
    pub lp_outputs: usize,
    pub saturations: usize,
    /// Relative error of each accepted analog solve against the exact digital
    /// solve of the same system. Only filled by [`hp_solve_traced`].
    pub lp_errors: Vec<f64>,
}

/// Refines `A x = b` to the residual tolerance of `cfg.precision`, using
/// `state` (programmed from `A`) for every correction.
pub fn hp_solve<R: Rng + ?Sized>(
    a: &Matrix,
    b: &Vector,
    state: &CrossbarState,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<(Vector, RefinementReport)> {
    refine(a, b, state, cfg, rng, None)
}

/// [`hp_solve`] that also records the one-shot error of every analog solve.
pub fn hp_solve_traced<R: Rng + ?Sized>(
    a: &Matrix,
    b: &Vector,
    state: &CrossbarState,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<(Vector, RefinementReport)> {
    let exact = Lu::factor(a).ok_or_else(|| Error::InvalidArgument("singular leaf matrix".into()))?;
    refine(a, b, state, cfg, rng, Some(&exact))
}

fn refine<R: Rng + ?Sized>(
    a: &Matrix,
    b: &Vector,
    state: &CrossbarState,
    cfg: &SolverConfig,
    rng: &mut R,
    exact: Option<&Lu>,
) -> Result<(Vector, RefinementReport)> {
    let m = a.rows();
    if !a.is_square() || b.len() != m || state.size() != m {
        return Err(Error::dims("hp_solve", format!("{m}x{m} system"), format!("rhs {} / array {}", b.len(), state.size())));
    }
    if m > cfg.device.leaf_max {
        return Err(Error::dims("hp_solve", format!("size <= {}", cfg.device.leaf_max), m));
    }
    let b_norm = b.norm_inf();
    if b_norm == 0.0 {
        return Err(Error::InvalidArgument("hp_solve needs a nonzero right-hand side".into()));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    let tol = cfg.precision.tolerance();

    let mut report = RefinementReport::default();
    let mut x = Vector::zeros(m);
    let mut r = b.clone();
    let mut min_residual = 1.0f64;
    let mut rising = 0usize;
    let mut prev = 1.0f64;

    loop {
        let z = correction(&r, state, cfg, rng, &mut report)?;
        if let Some(lu) = exact {
            let reference = lu.solve(&r);
            if let Ok(e) = relative_error(&z, &reference) {
                report.lp_errors.push(e);
            }
        }
        x = x.add(&z)?;
        report.iterations += 1;

        r = b.sub(&mvm(a, &x)?)?;
        let res = r.norm_inf() / b_norm;
        report.residual_history.push(res);
        report.final_residual = res;

        if res <= tol {
            report.converged = true;
            return Ok((x, report));
        }
        if !res.is_finite() {
            return Err(Error::Divergence {
                condition: condition_1(a),
                report: Box::new(report),
            });
        }
        rising = if res > prev { rising + 1 } else { 0 };
        prev = res;
        min_residual = min_residual.min(res);
        if rising >= DIVERGENCE_STREAK && res > DIVERGENCE_RATIO * min_residual {
            return Err(Error::Divergence {
                condition: condition_1(a),
                report: Box::new(report),
            });
        }
        if report.iterations >= cfg.max_iters {
            return Err(Error::NonConvergence {
                report: Box::new(report),
            });
        }
    }
}

/// One analog correction, backing the DAC gain off while the outputs clip.
fn correction<R: Rng + ?Sized>(
    r: &Vector,
    state: &CrossbarState,
    cfg: &SolverConfig,
    rng: &mut R,
    report: &mut RefinementReport,
) -> Result<Vector> {
    let mut gain = 1.0;
    let mut halvings = 0;
    loop {
        let out = amc_solve_with_gain(state, r, &cfg.device, &cfg.converters, gain, rng)?;
        report.lp_outputs += 1;
        if !out.saturated || halvings == MAX_GAIN_HALVINGS {
            return Ok(out.x);
        }
        report.saturations += 1;
        gain *= 0.5;
        halvings += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{program_crossbar, split_and_scale};
    use crate::numeric::solve_dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spd4() -> Matrix {
        Matrix::from_rows(&[
            vec![4.0, 1.0, 0.5, 0.4],
            vec![1.0, 3.0, 0.4, 0.5],
            vec![0.5, 0.4, 2.0, 0.6],
            vec![0.4, 0.5, 0.6, 1.8],
        ])
        .unwrap()
    }

    fn cfg(device: DeviceConfig, conv: ConverterConfig, bits: u32) -> SolverConfig {
        SolverConfig::new(device, conv, FixedPointSpec::new(bits).unwrap())
    }

    fn program(a: &Matrix, dev: &DeviceConfig, seed: u64) -> CrossbarState {
        program_crossbar(&split_and_scale(a, dev).unwrap(), dev, &mut rng(seed))
    }

    #[test]
    fn noise_free_converges_in_one_iteration() {
        let c = cfg(DeviceConfig::noise_free(), ConverterConfig { dac_bits: 40, adc_bits: 40, full_scale: 1.0 }, 24);
        let a = spd4();
        let s = program(&a, &c.device, 0);
        let b = Vector::new(vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let (x, rep) = hp_solve(&a, &b, &s, &c, &mut rng(1)).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.residual_history.len(), 1);
        let exact = solve_dense(&a, &b.as_column()).unwrap().column(0);
        assert!(relative_error(&x, &exact).unwrap() < 1e-6);
    }

    fn ten_bit_adc() -> ConverterConfig {
        ConverterConfig {
            adc_bits: 10,
            ..ConverterConfig::default()
        }
    }

    #[test]
    fn identity_with_default_noise_decays_geometrically() {
        let c = cfg(DeviceConfig::default(), ten_bit_adc(), 24);
        let a = Matrix::identity(4);
        let s = program(&a, &c.device, 2);
        let b = Vector::new(vec![0.3, -1.0, 0.7, 0.2]).unwrap();
        let (x, rep) = hp_solve(&a, &b, &s, &c, &mut rng(3)).unwrap();
        assert!(rep.converged);
        assert!(rep.final_residual <= c.precision.tolerance());
        // contraction per step bounded by the device error: write error on
        // a 220 μS diagonal is ≤ 10/220 relative, leakage ≤ 2/220 per cell
        let h = &rep.residual_history;
        for w in h.windows(2) {
            assert!(w[1] <= 0.25 * w[0], "{h:?}");
        }
        assert!(relative_error(&x, &b).unwrap() < 1e-6);
    }

    #[test]
    fn contraction_rate_matches_iteration_operator() {
        // oracle: with fixed write noise and ideal converters the error obeys
        // e_{k+1} = (I − Ã⁻¹A) e_k, so the iteration count follows ρ(I − Ã⁻¹A)
        let dev = DeviceConfig::default();
        let c = cfg(dev.clone(), ConverterConfig { dac_bits: 40, adc_bits: 40, full_scale: 1.0 }, 24);
        let a = spd4();
        let s = program(&a, &dev, 9);
        let a_eff = crate::device::effective_matrix(&s, &dev, &mut rng(0));
        let m = solve_dense(&a_eff, &a).unwrap();
        let iter_op = Matrix::identity(4).sub(&m).unwrap();
        let norm2 = nalgebra::DMatrix::from_row_slice(4, 4, iter_op.as_slice()).singular_values().max();
        assert!(norm2 < 0.9);
        let b = Vector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (_, rep) = hp_solve(&a, &b, &s, &c, &mut rng(4)).unwrap();
        let bound = (c.precision.tolerance().ln() / norm2.ln()).ceil() as usize + 2;
        assert!(rep.iterations <= bound, "{} > {bound}", rep.iterations);
        // after the first step the tail is nonincreasing
        for w in rep.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn mismatched_state_diverges() {
        let dev = DeviceConfig::noise_free();
        let c = cfg(dev.clone(), ConverterConfig::ideal(), 24);
        let a = spd4();
        // the array embodies −A, so each correction points the wrong way
        let s = program(&a.scale(-1.0), &dev, 0);
        let b = Vector::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        match hp_solve(&a, &b, &s, &c, &mut rng(0)) {
            Err(Error::Divergence { condition, report }) => {
                assert!(condition > 1.0);
                assert_eq!(report.iterations, DIVERGENCE_STREAK);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn unattainable_tolerance_reports_non_convergence() {
        // 2^-62 is below what f64 residuals can resolve
        let mut c = cfg(DeviceConfig::default(), ten_bit_adc(), 63);
        c.max_iters = 60;
        let a = spd4();
        let s = program(&a, &c.device, 1);
        let b = Vector::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        match hp_solve(&a, &b, &s, &c, &mut rng(0)) {
            Err(Error::NonConvergence { report }) | Err(Error::Divergence { report, .. }) => {
                assert!(!report.converged);
                assert!(report.final_residual > c.precision.tolerance());
                assert_eq!(report.residual_history.len(), report.iterations);
            }
            other => panic!("expected failure report, got {other:?}"),
        }
    }

    #[test]
    fn converged_solution_within_condition_bound() {
        let c = cfg(DeviceConfig::default(), ConverterConfig::default(), 24);
        let a = spd4();
        let kappa = condition_1(&a);
        for seed in 0..20 {
            let s = program(&a, &c.device, seed);
            let b = Vector::new(vec![1.0, -0.5, 0.25, 2.0]).unwrap();
            let (x, rep) = hp_solve_traced(&a, &b, &s, &c, &mut rng(seed + 100)).unwrap();
            assert_eq!(rep.lp_errors.len(), rep.iterations);
            let exact = solve_dense(&a, &b.as_column()).unwrap().column(0);
            assert!(relative_error(&x, &exact).unwrap() <= kappa * c.precision.tolerance());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = cfg(DeviceConfig::default(), ConverterConfig::default(), 24);
        let a = Matrix::identity(2);
        let s = program(&a, &c.device, 0);
        assert!(hp_solve(&a, &Vector::zeros(2), &s, &c, &mut rng(0)).is_err());
        assert!(hp_solve(&a, &Vector::zeros(3), &s, &c, &mut rng(0)).is_err());
    }

    fn random_spd(n: usize, seed: u64) -> Matrix {
        // diagonally dominant with off-diagonals inside the device range
        let mut r = rng(seed);
        let off = Matrix::from_fn(n, n, |_, _| r.random_range(0.3..1.0));
        let off = off.add(&off.transpose()).unwrap().scale(0.5);
        Matrix::from_fn(n, n, |i, j| if i == j { n as f64 + 1.0 } else { off[(i, j)] })
    }

    fn rhs(n: usize, seed: u64) -> Vector {
        let mut r = rng(seed);
        Vector::new((0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(48))]

        #[test]
        fn contraction_bounds_iterations(n in 2usize..5, seed in 0u64..1_000_000) {
            let dev = DeviceConfig { read_noise_sigma: 0.0, ..DeviceConfig::default() };
            let c = cfg(dev.clone(), ConverterConfig { dac_bits: 40, adc_bits: 40, full_scale: 1.0 }, 24);
            let a = random_spd(n, seed);
            let s = program(&a, &dev, seed + 1);
            let a_eff = crate::device::effective_matrix(&s, &dev, &mut rng(0));
            let iter_op = Matrix::identity(n).sub(&solve_dense(&a_eff, &a).unwrap()).unwrap();
            let rho = nalgebra::DMatrix::from_row_slice(n, n, iter_op.as_slice()).singular_values().max();
            proptest::prop_assume!(rho < 0.9);
            let (_, rep) = hp_solve(&a, &rhs(n, seed + 2), &s, &c, &mut rng(seed + 3)).unwrap();
            let bound = (c.precision.tolerance().ln() / rho.ln()).ceil() as usize + 2;
            proptest::prop_assert!(rep.converged && rep.iterations <= bound, "{} > {bound}", rep.iterations);
        }

        #[test]
        fn failure_is_reported_never_silent(
            n in 1usize..5,
            seed in 0u64..1_000_000,
            adc_bits in 3u32..12,
            bits in 8u32..40,
            max_iters in 1usize..30,
        ) {
            let conv = ConverterConfig { adc_bits, ..ConverterConfig::default() };
            let mut c = cfg(DeviceConfig::default(), conv, bits);
            c.max_iters = max_iters;
            let a = random_spd(n, seed);
            let b = rhs(n, seed + 2);
            let s = program(&a, &c.device, seed + 1);
            let tol = c.precision.tolerance();
            match hp_solve(&a, &b, &s, &c, &mut rng(seed + 3)) {
                Ok((x, rep)) => {
                    proptest::prop_assert!(rep.converged && rep.final_residual <= tol);
                    let res = b.sub(&mvm(&a, &x).unwrap()).unwrap().norm_inf() / b.norm_inf();
                    proptest::prop_assert!((res - rep.final_residual).abs() <= 1e-12);
                }
                Err(Error::NonConvergence { report }) | Err(Error::Divergence { report, .. }) => {
                    proptest::prop_assert!(!report.converged && report.final_residual > tol);
                    proptest::prop_assert!(report.iterations <= max_iters);
                }
                Err(e) => proptest::prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
