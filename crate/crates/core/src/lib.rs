//! Second-order (KFAC) neural-network training with every matrix inversion
//! routed through a simulated RRAM analog matrix-computing pipeline.
//!
//! The layers, bottom up:
//!
//! * [`numeric`]: dense matrices, fixed-point grids, the relative-error metric.
//! * [`device`]: conductance mapping and write-verify programming of a crossbar.
//! * [`circuit`]: one-shot analog solve with DAC/ADC quantization.
//! * [`hpinv`]: iterative refinement to a fixed-point precision target.
//! * [`blockamc`]: recursive block inversion for matrices larger than the array.
//! * [`kfac`]: Kronecker factors, damping, and the preconditioned update.
//! * [`nn`]: the conv/pool/FC network and first-order baselines.
//! * [`dataset`]: IDX ingestion, class splits, downsampling, synthetic data.
//! * [`experiment`]: configuration, training runs, calibration, outputs.

pub mod blockamc;
pub mod circuit;
pub mod dataset;
pub mod device;
pub mod error;
pub mod experiment;
pub mod hpinv;
pub mod kfac;
pub mod nn;
pub mod numeric;

pub use error::{Error, Result};
