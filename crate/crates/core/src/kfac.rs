//! Kronecker-factored natural-gradient optimizer. Forward and backward
//! passes run digitally; every factor inversion goes through a
//! [`LinearSolver`], which is the analog pipeline in the experiment.

use serde::{Deserialize, Serialize};

use crate::blockamc::{precondition_update, solve_vector, ExactSolver, LinearSolver};
use crate::error::{Error, Result};
use crate::nn::{backward, forward, Image, Model};
use crate::numeric::{relative_error, vectorize, Matrix, Vector};

pub const PI_MIN: f64 = 1e-3;
pub const PI_MAX: f64 = 1e3;

/// Names of the four update vectors produced per step, in report order.
pub const UPDATE_NAMES: [&str; 4] = ["conv.weight", "conv.bias", "fc.weight", "fc.bias"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KfacConfig {
    /// Global damping λ.
    pub damping: f64,
    pub learning_rate: f64,
}

impl Default for KfacConfig {
    fn default() -> Self {
        KfacConfig {
            damping: 5e-2,
            learning_rate: 0.4,
        }
    }
}

impl KfacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.damping > 0.0 && self.damping.is_finite() && self.learning_rate > 0.0 && self.learning_rate.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("kfac damping and learning_rate must be positive: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Damping {
    pub alpha: f64,
    pub beta: f64,
    pub pi: f64,
    /// `trace(G) = 0` forced `π = 1`.
    pub fallback: bool,
}

/// One layer's curvature block `A ⊗ G` with its damping split.
#[derive(Clone, Debug, PartialEq)]
pub struct KroneckerFactors {
    pub a_factor: Matrix,
    pub g_factor: Matrix,
    pub alpha: f64,
    pub beta: f64,
}

impl KroneckerFactors {
    pub fn new(a_factor: Matrix, g_factor: Matrix, lambda: f64) -> Result<(Self, Damping)> {
        let d = compute_damping(&a_factor, &g_factor, lambda)?;
        Ok((
            KroneckerFactors {
                a_factor,
                g_factor,
                alpha: d.alpha,
                beta: d.beta,
            },
            d,
        ))
    }

    /// Dimension of the Fisher block this pair stands for.
    pub fn fisher_dim(&self) -> usize {
        self.a_factor.rows() * self.g_factor.rows()
    }
}

fn second_moment(x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(x.transpose().matmul(x)?.scale(1.0 / x.rows() as f64))
}

/// `A = mean aaᵀ`, `G = mean ggᵀ` over the batch rows.
pub fn fc_factors(activations: &Matrix, preact_grads: &Matrix) -> Result<(Matrix, Matrix)> {
    if activations.rows() != preact_grads.rows() {
        return Err(Error::dims("fc_factors", activations.rows(), preact_grads.rows()));
    }
    Ok((second_moment(activations)?, second_moment(preact_grads)?))
}

/// Conv factors averaged over every (sample, position) patch.
pub fn conv_factors(patches: &Matrix, out_grads: &Matrix) -> Result<(Matrix, Matrix)> {
    if patches.rows() != out_grads.rows() {
        return Err(Error::dims("conv_factors", patches.rows(), out_grads.rows()));
    }
    Ok((second_moment(patches)?, second_moment(out_grads)?))
}

pub fn compute_damping(a: &Matrix, g: &Matrix, lambda: f64) -> Result<Damping> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("damping λ must be positive, got {lambda}")));
    }
    if !a.is_square() || !g.is_square() || a.rows() == 0 || g.rows() == 0 {
        return Err(Error::dims(
            "compute_damping",
            "nonempty square factors",
            format!("{:?}, {:?}", a.shape(), g.shape()),
        ));
    }
    let ta = a.trace() / a.rows() as f64;
    let tg = g.trace() / g.rows() as f64;
    let (pi, fallback) = if tg == 0.0 {
        (1.0, true)
    } else {
        ((ta / tg).sqrt().clamp(PI_MIN, PI_MAX), false)
    };
    let s = lambda.sqrt();
    Ok(Damping {
        alpha: pi * s,
        beta: s / pi,
        pi,
        fallback,
    })
}

/// Preconditioned direction for one layer: weight and bias updates.
pub fn layer_update<S: LinearSolver + ?Sized>(
    grad_w: &Matrix,
    grad_b: &Vector,
    factors: &KroneckerFactors,
    solver: &mut S,
) -> Result<(Matrix, Vector)> {
    let KroneckerFactors {
        a_factor,
        g_factor,
        alpha,
        beta,
    } = factors;
    let w = precondition_update(grad_w, a_factor, g_factor, *alpha, *beta, solver)?;
    let b = solve_vector(solver, &g_factor.add_diagonal(*beta), grad_b)
        .map_err(|e| Error::Stage {
            stage: "bias",
            source: Box::new(e),
        })?
        .scale(1.0 / (1.0 + alpha));
    Ok((w, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Batch loss before the update.
    pub loss: f64,
    /// Relative error of each update vector against exact inversion, in
    /// [`UPDATE_NAMES`] order.
    pub update_rel_errors: [f64; 4],
    pub conv_damping: Damping,
    pub fc_damping: Damping,
}

impl StepReport {
    pub fn mean_update_error(&self) -> f64 {
        self.update_rel_errors.iter().sum::<f64>() / 4.0
    }

    pub fn warnings(&self) -> Vec<String> {
        [("conv", &self.conv_damping), ("fc", &self.fc_damping)]
            .iter()
            .filter(|(_, d)| d.fallback)
            .map(|(l, _)| format!("{l}: zero output-gradient trace, damping split fell back to π = 1"))
            .collect()
    }
}

fn update_error(estimate: &Vector, reference: &Vector) -> f64 {
    match relative_error(estimate, reference) {
        Ok(e) => e,
        Err(_) if estimate.is_zero() => 0.0,
        Err(_) => f64::INFINITY,
    }
}

/// One KFAC step: digital forward/backward, per-layer factors, inversion
/// through `solver`, then `θ ← θ − η·Δθ`.
pub fn kfac_step<S: LinearSolver + ?Sized>(
    model: &mut Model,
    images: &[Image],
    labels: &[usize],
    cfg: &KfacConfig,
    solver: &mut S,
) -> Result<StepReport> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let (_, tape) = forward(model, images)?;
    let bw = backward(model, &tape, labels)?;

    let (a_conv, g_conv) = conv_factors(&tape.patches, &bw.conv_preact_grads)?;
    let (conv, conv_damping) = KroneckerFactors::new(a_conv, g_conv, cfg.damping)?;
    let (a_fc, g_fc) = fc_factors(&tape.features, &bw.fc_preact_grads)?;
    let (fc, fc_damping) = KroneckerFactors::new(a_fc, g_fc, cfg.damping)?;

    let layer_err = |layer: &'static str| move |e: Error| Error::Layer { layer, source: Box::new(e) };
    let g = &bw.grads;
    let (conv_w, conv_b) = layer_update(&g.conv_w, &g.conv_b, &conv, solver).map_err(layer_err("conv"))?;
    let (fc_w, fc_b) = layer_update(&g.fc_w, &g.fc_b, &fc, solver).map_err(layer_err("fc"))?;

    let (ref_conv_w, ref_conv_b) = layer_update(&g.conv_w, &g.conv_b, &conv, &mut ExactSolver)?;
    let (ref_fc_w, ref_fc_b) = layer_update(&g.fc_w, &g.fc_b, &fc, &mut ExactSolver)?;
    let update_rel_errors = [
        update_error(&vectorize(&conv_w), &vectorize(&ref_conv_w)),
        update_error(&conv_b, &ref_conv_b),
        update_error(&vectorize(&fc_w), &vectorize(&ref_fc_w)),
        update_error(&fc_b, &ref_fc_b),
    ];

    let step = Model {
        conv_w,
        conv_b,
        fc_w,
        fc_b,
    };
    model.apply_step(&step, cfg.learning_rate);
    Ok(StepReport {
        loss: bw.loss,
        update_rel_errors,
        conv_damping,
        fc_damping,
    })
}
