//! Behavioral model of the closed-loop analog inversion circuit.
//!
//! The feedback loop settles at `Ã⁻¹ b` for the matrix `Ã` the crossbar
//! physically embodies, so the model solves that noisy system exactly and
//! wraps it in DAC input and ADC output quantization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{effective_matrix, CrossbarState, DeviceConfig};
use crate::error::{Error, Result};
use crate::numeric::{quantize_fixed, FixedPointSpec, Lu, Vector};

/// Output swing relative to input full scale before the amplifiers clip.
pub const OUTPUT_HEADROOM: f64 = 10.0;

/// Condition estimate above which the loop is treated as unstable.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverterConfig {
    pub dac_bits: u32,
    pub adc_bits: u32,
    pub full_scale: f64,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        ConverterConfig {
            dac_bits: 8,
            adc_bits: 6,
            full_scale: 1.0,
        }
    }
}

impl ConverterConfig {
    pub fn ideal() -> Self {
        ConverterConfig {
            dac_bits: 24,
            adc_bits: 24,
            full_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bits_ok = |b: u32| (2..=FixedPointSpec::MAX_BITS).contains(&b);
        if bits_ok(self.dac_bits) && bits_ok(self.adc_bits) && self.full_scale > 0.0 && self.full_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid converter config: {self:?}")))
        }
    }

    fn dac(&self) -> FixedPointSpec {
        FixedPointSpec::new(self.dac_bits).expect("validated dac bits")
    }

    fn adc(&self) -> FixedPointSpec {
        FixedPointSpec::new(self.adc_bits).expect("validated adc bits")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmcOutput {
    pub x: Vector,
    /// Some output clipped at the amplifier rails.
    pub saturated: bool,
}

/// One-shot low-precision solve of `A x = b` through a programmed crossbar.
pub fn amc_solve<R: Rng + ?Sized>(
    state: &CrossbarState,
    b: &Vector,
    dev: &DeviceConfig,
    conv: &ConverterConfig,
    rng: &mut R,
) -> Result<AmcOutput> {
    amc_solve_with_gain(state, b, dev, conv, 1.0, rng)
}

/// As [`amc_solve`], but drives the DACs at `gain` (in `(0, 1]`) of full
/// scale. Lower gain trades input resolution for output headroom.
pub fn amc_solve_with_gain<R: Rng + ?Sized>(
    state: &CrossbarState,
    b: &Vector,
    dev: &DeviceConfig,
    conv: &ConverterConfig,
    gain: f64,
    rng: &mut R,
) -> Result<AmcOutput> {
    let m = state.size();
    if b.len() != m {
        return Err(Error::dims("amc_solve", m, b.len()));
    }
    if m > dev.leaf_max {
        return Err(Error::dims("amc_solve", format!("size <= {}", dev.leaf_max), m));
    }
    let b_max = b.norm_inf();
    if b_max == 0.0 || !b_max.is_finite() {
        return Err(Error::InvalidArgument("amc_solve needs a nonzero finite right-hand side".into()));
    }
    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::InvalidArgument(format!("DAC gain {gain} outside (0, 1]")));
    }

    // conductance-domain matrix Ã/scale
    let a_eff = effective_matrix(state, dev, rng);
    let g_matrix = a_eff.scale(1.0 / state.targets.scale);
    let condition = crate::numeric::condition_1(&g_matrix);
    if condition > MAX_CONDITION {
        return Err(Error::CircuitUnstable { condition });
    }
    let lu = Lu::factor(&g_matrix).ok_or(Error::CircuitUnstable {
        condition: f64::INFINITY,
    })?;

    let fs = conv.full_scale;
    let dac = conv.dac();
    let b_in: Vec<f64> = b
        .as_slice()
        .iter()
        .map(|&v| fs * quantize_fixed(gain * v / b_max, dac).value)
        .collect();

    let rail = fs * OUTPUT_HEADROOM;
    let adc = conv.adc();
    let mut saturated = false;
    let x: Vec<f64> = lu
        .solve_slice(&b_in)
        .into_iter()
        .map(|v| {
            if v.abs() > rail {
                saturated = true;
            }
            let q = quantize_fixed(v.clamp(-rail, rail) / rail, adc);
            q.value * rail
        })
        .collect();

    let unscale = b_max / (fs * gain * state.targets.scale);
    Ok(AmcOutput {
        x: Vector::from_vec_unchecked(x.into_iter().map(|v| v * unscale).collect()),
        saturated,
    })
}
