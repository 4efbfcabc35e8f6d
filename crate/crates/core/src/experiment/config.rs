use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::ConverterConfig;
use crate::device::DeviceConfig;
use crate::error::{Error, Result};
use crate::hpinv::{SolverConfig, DEFAULT_MAX_ITERS, DEFAULT_REPROGRAM_RETRIES};
use crate::kfac::KfacConfig;
use crate::numeric::FixedPointSpec;

pub const KFAC_DEFAULT_EPOCHS: usize = 50;
pub const BASELINE_DEFAULT_EPOCHS: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    KfacAmc,
    KfacExact,
    Sgdm,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::KfacAmc,
        OptimizerKind::KfacExact,
        OptimizerKind::Sgdm,
        OptimizerKind::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::KfacAmc => "kfac-amc",
            OptimizerKind::KfacExact => "kfac-exact",
            OptimizerKind::Sgdm => "sgdm",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn is_kfac(self) -> bool {
        matches!(self, OptimizerKind::KfacAmc | OptimizerKind::KfacExact)
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Epochs `first_epoch..=last_epoch` (open-ended when `last_epoch` is
/// absent) refine to `total_bits`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionPhase {
    pub first_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_epoch: Option<usize>,
    pub total_bits: u32,
}

pub fn default_precision_schedule() -> Vec<PrecisionPhase> {
    vec![
        PrecisionPhase {
            first_epoch: 1,
            last_epoch: Some(28),
            total_bits: 24,
        },
        PrecisionPhase {
            first_epoch: 29,
            last_epoch: None,
            total_bits: 26,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Defaults to 50 for KFAC and 120 for the first-order baselines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub precision_schedule: Vec<PrecisionPhase>,
    pub max_refinement_iters: usize,
    /// Crossbar re-programming attempts per leaf after a failed refinement.
    pub reprogram_retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::KfacAmc,
            epochs: None,
            batch_size: 100,
            seed: 0,
            precision_schedule: default_precision_schedule(),
            max_refinement_iters: DEFAULT_MAX_ITERS,
            reprogram_retries: DEFAULT_REPROGRAM_RETRIES,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.optimizer.is_kfac() {
            KFAC_DEFAULT_EPOCHS
        } else {
            BASELINE_DEFAULT_EPOCHS
        })
    }

    pub fn precision_for_epoch(&self, epoch: usize) -> Result<FixedPointSpec> {
        let phase = self
            .precision_schedule
            .iter()
            .find(|p| epoch >= p.first_epoch && p.last_epoch.is_none_or(|l| epoch <= l))
            .ok_or_else(|| Error::Config(format!("no precision phase covers epoch {epoch}")))?;
        FixedPointSpec::new(phase.total_bits)
    }

    /// Phases must tile `[1, epochs]` in order without gaps or overlap.
    fn validate_schedule(&self) -> Result<()> {
        let epochs = self.epochs();
        let mut next = 1;
        for (k, p) in self.precision_schedule.iter().enumerate() {
            FixedPointSpec::new(p.total_bits).map_err(|_| Error::Config(format!("phase {k}: bad total_bits")))?;
            if p.first_epoch != next {
                return Err(Error::Config(format!(
                    "precision phase {k} starts at epoch {}, expected {next}",
                    p.first_epoch
                )));
            }
            match p.last_epoch {
                Some(l) if l < p.first_epoch => {
                    return Err(Error::Config(format!("precision phase {k} ends before it starts")));
                }
                Some(l) => next = l + 1,
                None if k + 1 != self.precision_schedule.len() => {
                    return Err(Error::Config("only the last precision phase may be open-ended".into()));
                }
                None => next = usize::MAX,
            }
            if next > epochs {
                return Ok(());
            }
        }
        Err(Error::Config(format!("precision schedule stops before epoch {epochs}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Emnist,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Jittered letter-like glyphs.
    Letters,
    /// Gaussian blobs at fixed positions.
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Class letters in class-index order.
    pub letters: String,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Seed of the sample selection, fixed across training seeds.
    pub seed: u64,
    pub synthetic: SyntheticKind,
    pub noise: f64,
    pub max_shift: i32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Emnist,
            images: None,
            labels: None,
            letters: "manc".into(),
            per_class_train: 50,
            per_class_test: 100,
            seed: 0,
            synthetic: SyntheticKind::Letters,
            noise: 0.15,
            max_shift: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdmConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdmConfig {
    fn default() -> Self {
        SgdmConfig {
            learning_rate: 1.0,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Hyperparameter grids; empty grids fall back to the configured value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kfac_learning_rate: Vec<f64>,
    pub kfac_damping: Vec<f64>,
    pub sgdm_learning_rate: Vec<f64>,
    pub sgdm_momentum: Vec<f64>,
    pub adam_learning_rate: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub device: DeviceConfig,
    pub converters: ConverterConfig,
    pub kfac: KfacConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sgdm: SgdmConfig,
    pub adam: AdamConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn sha256(&self) -> String {
        Sha256::digest(self.to_toml_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Analog solver settings for refinement to `precision`.
    pub fn solver_config(&self, precision: FixedPointSpec) -> Result<SolverConfig> {
        let mut solver = SolverConfig::new(self.device.clone(), self.converters.clone(), precision);
        solver.max_iters = self.train.max_refinement_iters;
        solver.reprogram_retries = self.train.reprogram_retries;
        solver.validate()?;
        Ok(solver)
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.converters.validate()?;
        self.kfac.validate()?;
        let t = &self.train;
        if t.epochs() == 0 || t.batch_size == 0 || t.max_refinement_iters == 0 {
            return Err(Error::Config("epochs, batch_size and max_refinement_iters must be positive".into()));
        }
        t.validate_schedule()?;
        let d = &self.data;
        if d.letters.chars().count() != crate::nn::CLASSES || d.per_class_train == 0 || d.per_class_test == 0 {
            return Err(Error::Config(format!(
                "data needs {} letters and positive split sizes",
                crate::nn::CLASSES
            )));
        }
        let train_size = d.per_class_train * crate::nn::CLASSES;
        if train_size % t.batch_size != 0 {
            return Err(Error::Config(format!(
                "batch_size {} does not divide the training set size {train_size}",
                t.batch_size
            )));
        }
        if !(d.noise >= 0.0) || d.max_shift < 0 {
            return Err(Error::Config("synthetic noise and max_shift must be nonnegative".into()));
        }
        if !(self.sgdm.learning_rate > 0.0) || !(0.0..1.0).contains(&self.sgdm.momentum) {
            return Err(Error::Config(format!("bad [sgdm] section: {:?}", self.sgdm)));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("bad [adam] section: {a:?}")));
        }
        Ok(())
    }
}

/// Independent seed streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Init = 1,
    Shuffle = 2,
    Device = 3,
    Calibrate = 4,
    SyntheticTrain = 5,
    SyntheticTest = 6,
}

/// First word of ChaCha8 keyed by `master` on the stream's own nonce.
pub fn derive_seed(master: u64, stream: SeedStream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}
