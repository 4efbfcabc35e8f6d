//! 1T1R RRAM crossbar model: signed matrix to conductance-pair mapping,
//! write-verify programming, and readback of the matrix the array embodies.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Device parameters. All conductances are in μS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub g_min: f64,
    pub g_max: f64,
    /// Reference conductance G₀ that a matrix entry of 1 maps to.
    pub g_unit: f64,
    pub write_tolerance: f64,
    pub off_leak_max: f64,
    pub read_noise_sigma: f64,
    pub leaf_max: usize,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            g_min: 20.0,
            g_max: 220.0,
            g_unit: 100.0,
            write_tolerance: 10.0,
            off_leak_max: 2.0,
            read_noise_sigma: 0.0,
            leaf_max: 4,
        }
    }
}

impl DeviceConfig {
    /// Default ranges with every noise source switched off.
    pub fn noise_free() -> Self {
        DeviceConfig {
            write_tolerance: 0.0,
            off_leak_max: 0.0,
            read_noise_sigma: 0.0,
            ..DeviceConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.g_min > 0.0
            && self.g_min < self.g_max
            && self.write_tolerance >= 0.0
            && self.write_tolerance < self.g_min
            && self.off_leak_max >= 0.0
            && self.off_leak_max < self.g_min
            && self.read_noise_sigma >= 0.0
            && (self.g_min..=self.g_max).contains(&self.g_unit)
            && self.leaf_max >= 1
            && [self.g_min, self.g_max, self.g_unit, self.write_tolerance, self.off_leak_max, self.read_noise_sigma]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid device config: {self:?}")))
        }
    }
}

/// Target conductances for the positive and negative arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ConductanceTargets {
    pub pos: Matrix,
    pub neg: Matrix,
    /// Matrix units per G₀.
    pub scale: f64,
}

impl ConductanceTargets {
    pub fn size(&self) -> usize {
        self.pos.rows()
    }

    /// `scale·(pos − neg)/g_unit`: the clipped, mapped input.
    pub fn mapped_matrix(&self, cfg: &DeviceConfig) -> Matrix {
        Matrix::from_fn(self.size(), self.size(), |i, j| {
            self.scale * (self.pos[(i, j)] - self.neg[(i, j)]) / cfg.g_unit
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossbarState {
    pub programmed_pos: Matrix,
    pub programmed_neg: Matrix,
    pub targets: ConductanceTargets,
    pub rng_seed_used: u64,
}

impl CrossbarState {
    pub fn size(&self) -> usize {
        self.targets.size()
    }
}

/// Splits `a` into positive and negative conductance arrays. The largest
/// magnitude maps to `g_max`; nonzero magnitudes below `g_min` are clamped
/// up to `g_min`.
pub fn split_and_scale(a: &Matrix, cfg: &DeviceConfig) -> Result<ConductanceTargets> {
    if !a.is_square() {
        return Err(Error::dims("split_and_scale", "square matrix", format!("{}x{}", a.rows(), a.cols())));
    }
    if a.rows() > cfg.leaf_max {
        return Err(Error::dims("split_and_scale", format!("size <= {}", cfg.leaf_max), a.rows()));
    }
    let max = a.max_abs();
    if max == 0.0 {
        return Err(Error::DegenerateMapping);
    }
    let scale = max * cfg.g_unit / cfg.g_max;
    let m = a.rows();
    let mut pos = Matrix::zeros(m, m);
    let mut neg = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let v = a[(i, j)];
            if v == 0.0 {
                continue;
            }
            let g = (v.abs() / max * cfg.g_max).clamp(cfg.g_min, cfg.g_max);
            if v > 0.0 {
                pos[(i, j)] = g;
            } else {
                neg[(i, j)] = g;
            }
        }
    }
    Ok(ConductanceTargets { pos, neg, scale })
}

fn program_array<R: Rng + ?Sized>(target: &Matrix, cfg: &DeviceConfig, rng: &mut R) -> Matrix {
    let mut out = target.clone();
    for g in out.as_mut_slice() {
        *g = if *g == 0.0 {
            if cfg.off_leak_max > 0.0 {
                rng.random_range(0.0..=cfg.off_leak_max)
            } else {
                0.0
            }
        } else if cfg.write_tolerance > 0.0 {
            *g + rng.random_range(-cfg.write_tolerance..=cfg.write_tolerance)
        } else {
            *g
        };
    }
    out
}

/// Write-verify programming: on-cells land uniformly within
/// `±write_tolerance` of target, off-cells leak uniformly in
/// `[0, off_leak_max]`.
pub fn program_crossbar<R: Rng + ?Sized>(
    targets: &ConductanceTargets,
    cfg: &DeviceConfig,
    rng: &mut R,
) -> CrossbarState {
    let rng_seed_used = rng.random();
    let mut cell_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(rng_seed_used);
    let programmed_pos = program_array(&targets.pos, cfg, &mut cell_rng);
    let programmed_neg = program_array(&targets.neg, cfg, &mut cell_rng);
    CrossbarState {
        programmed_pos,
        programmed_neg,
        targets: targets.clone(),
        rng_seed_used,
    }
}

/// Reads back the matrix the array embodies, with fresh per-cell read
/// noise on every call.
pub fn effective_matrix<R: Rng + ?Sized>(state: &CrossbarState, cfg: &DeviceConfig, rng: &mut R) -> Matrix {
    let m = state.size();
    let scale = state.targets.scale;
    let noise = (cfg.read_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.read_noise_sigma).expect("validated sigma"));
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let mut g = state.programmed_pos[(i, j)] - state.programmed_neg[(i, j)];
            if let Some(n) = &noise {
                g += n.sample(rng);
            }
            out[(i, j)] = scale * g / cfg.g_unit;
        }
    }
    out
}
