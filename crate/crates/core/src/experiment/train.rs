use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{
    derive_seed, version_string, DataSource, ExperimentConfig, OptimizerKind, SeedStream, SyntheticKind,
};
use super::metrics::emit_metrics;
use crate::blockamc::{ExactSolver, SolveContext, SolveStatistics};
use crate::dataset::{build_split, load_idx, synthetic_blobs, synthetic_letters, LabeledImages, Split};
use crate::error::{Error, Result};
use crate::kfac::{kfac_step, StepReport};
use crate::nn::{backward, evaluate, forward, Adam, Model, SgdMomentum};
use crate::numeric::Matrix;

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: LabeledImages,
    pub test: LabeledImages,
    /// Human-readable provenance for the run summary.
    pub description: String,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    match d.source {
        DataSource::Emnist => {
            let (Some(images), Some(labels)) = (&d.images, &d.labels) else {
                return Err(Error::Config(
                    "EMNIST source needs [data] images and labels paths (or use the synthetic source)".into(),
                ));
            };
            let raw = load_idx(images, labels)?;
            let letters: Vec<char> = d.letters.chars().collect();
            let (train, test) = build_split(&raw, &letters, d.per_class_train, d.per_class_test, d.seed)?;
            Ok(Datasets {
                train,
                test,
                description: format!("emnist:{}", images.display()),
            })
        }
        DataSource::Synthetic => {
            let tr = derive_seed(d.seed, SeedStream::SyntheticTrain);
            let te = derive_seed(d.seed, SeedStream::SyntheticTest);
            let (train, test, kind) = match d.synthetic {
                SyntheticKind::Letters => (
                    synthetic_letters(d.per_class_train, d.noise, d.max_shift, tr, Split::Train)?,
                    synthetic_letters(d.per_class_test, d.noise, d.max_shift, te, Split::Test)?,
                    "letters",
                ),
                SyntheticKind::Blobs => (
                    synthetic_blobs(d.per_class_train, d.noise, tr, Split::Train)?,
                    synthetic_blobs(d.per_class_test, d.noise, te, Split::Test)?,
                    "blobs",
                ),
            };
            Ok(Datasets {
                train,
                test,
                description: format!("synthetic-{kind}:noise={},shift={},seed={}", d.noise, d.max_shift, d.seed),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean over this epoch's update vectors; absent for first-order runs.
    pub mean_update_rel_err: Option<f64>,
    /// Cumulative analog vector outputs.
    pub lp_vector_outputs: u64,
    /// Cumulative refinement solves.
    pub hp_solves: u64,
    /// Mean refinement iterations over this epoch's solves.
    pub mean_refinement_iters: Option<f64>,
    pub precision_bits: Option<u32>,
    /// Solves issued during this epoch, keyed by fixed-point width.
    pub solves_by_bits: BTreeMap<u32, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// Stopped once the training set was fit.
    Stopped,
    Aborted { epoch: usize, step: usize, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub dataset: String,
}

#[derive(Debug)]
pub struct TrainRecord {
    pub header: RunHeader,
    pub rows: Vec<EpochRow>,
    /// Per step, the relative errors of the four update vectors.
    pub update_errors: Vec<[f64; 4]>,
    pub statistics: SolveStatistics,
    pub warnings: Vec<String>,
    pub status: RunStatus,
    /// The solver failure behind an aborted run.
    pub abort_error: Option<Error>,
    /// Pooled test-set features of the final model, `N × FEATURES`.
    pub test_features: Matrix,
    pub test_labels: Vec<usize>,
    pub model: Model,
}

impl TrainRecord {
    /// First epoch whose post-epoch training accuracy is exactly 1.
    pub fn epochs_to_full_accuracy(&self) -> Option<usize> {
        epochs_to_full_accuracy(&self.rows)
    }

    pub fn update_vector_count(&self) -> usize {
        self.update_errors.len() * 4
    }

    pub fn mean_update_error(&self) -> Option<f64> {
        if self.update_errors.is_empty() {
            return None;
        }
        let all: Vec<f64> = self.update_errors.iter().flatten().copied().collect();
        Some(all.iter().sum::<f64>() / all.len() as f64)
    }

    pub fn final_row(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

pub fn epochs_to_full_accuracy(rows: &[EpochRow]) -> Option<usize> {
    rows.iter().find(|r| r.train_acc == 1.0).map(|r| r.epoch)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// End the run after the first epoch at 100% training accuracy.
    pub stop_when_fit: bool,
}

enum Stepper {
    Analog(Box<SolveContext>),
    Exact,
    Sgdm(SgdMomentum),
    Adam(Adam),
}

impl Stepper {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.train.optimizer {
            OptimizerKind::KfacAmc => {
                let solver = cfg.solver_config(cfg.train.precision_for_epoch(1)?)?;
                let seed = derive_seed(cfg.train.seed, SeedStream::Device);
                Stepper::Analog(Box::new(SolveContext::new(solver, seed)))
            }
            OptimizerKind::KfacExact => Stepper::Exact,
            OptimizerKind::Sgdm => Stepper::Sgdm(SgdMomentum::new(cfg.sgdm.learning_rate, cfg.sgdm.momentum)?),
            OptimizerKind::Adam => {
                let a = &cfg.adam;
                Stepper::Adam(Adam::new(a.learning_rate, a.beta1, a.beta2, a.eps)?)
            }
        })
    }

    fn step(&mut self, cfg: &ExperimentConfig, model: &mut Model, data: &LabeledImages) -> Result<Option<StepReport>> {
        match self {
            Stepper::Analog(ctx) => kfac_step(model, &data.images, &data.labels, &cfg.kfac, ctx.as_mut()).map(Some),
            Stepper::Exact => kfac_step(model, &data.images, &data.labels, &cfg.kfac, &mut ExactSolver).map(Some),
            Stepper::Sgdm(opt) => {
                let (_, tape) = forward(model, &data.images)?;
                opt.step(model, &backward(model, &tape, &data.labels)?.grads);
                Ok(None)
            }
            Stepper::Adam(opt) => {
                let (_, tape) = forward(model, &data.images)?;
                opt.step(model, &backward(model, &tape, &data.labels)?.grads);
                Ok(None)
            }
        }
    }

    fn statistics(&self) -> SolveStatistics {
        match self {
            Stepper::Analog(ctx) => ctx.statistics().clone(),
            _ => SolveStatistics::default(),
        }
    }
}

/// Runs one training experiment in memory. Solver failures do not return
/// `Err`; they end the run with [`RunStatus::Aborted`] and the epochs
/// completed so far.
pub fn train(cfg: &ExperimentConfig, data: &Datasets, opts: &TrainOptions) -> Result<TrainRecord> {
    cfg.validate()?;
    if data.train.len() % cfg.train.batch_size != 0 {
        return Err(Error::Config(format!(
            "batch_size {} does not divide the training set size {}",
            cfg.train.batch_size,
            data.train.len()
        )));
    }
    let optimizer = cfg.train.optimizer;
    let mut model = Model::init(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, SeedStream::Init)));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, SeedStream::Shuffle));
    let mut stepper = Stepper::new(cfg)?;

    let mut rows = Vec::new();
    let mut update_errors = Vec::new();
    let mut warnings = Vec::new();
    let mut status = RunStatus::Completed;
    let mut abort_error = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    'epochs: for epoch in 1..=cfg.train.epochs() {
        let bits = cfg.train.precision_for_epoch(epoch)?;
        if let Stepper::Analog(ctx) = &mut stepper {
            ctx.config.precision = bits;
        }
        let before = stepper.statistics();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_errors = Vec::new();
        for (step, idx) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch = data.train.select(idx);
            match stepper.step(cfg, &mut model, &batch) {
                Ok(Some(report)) => {
                    for w in report.warnings() {
                        warnings.push(format!("epoch {epoch}, step {}: {w}", step + 1));
                    }
                    epoch_errors.extend(report.update_rel_errors);
                    update_errors.push(report.update_rel_errors);
                }
                Ok(None) => {}
                Err(e) => {
                    status = RunStatus::Aborted {
                        epoch,
                        step: step + 1,
                        error: e.to_string(),
                    };
                    abort_error = Some(e);
                    break 'epochs;
                }
            }
        }

        let stats = stepper.statistics();
        let delta = stats.since(&before);
        let train_eval = evaluate(&model, &data.train)?;
        let test_eval = evaluate(&model, &data.test)?;
        let analog = matches!(stepper, Stepper::Analog(_));
        rows.push(EpochRow {
            epoch,
            train_loss: train_eval.loss,
            train_acc: train_eval.accuracy,
            test_acc: test_eval.accuracy,
            mean_update_rel_err: optimizer
                .is_kfac()
                .then(|| epoch_errors.iter().sum::<f64>() / epoch_errors.len() as f64),
            lp_vector_outputs: stats.lp_vector_outputs,
            hp_solves: stats.leaf_solves,
            mean_refinement_iters: analog.then(|| delta.mean_iterations()),
            precision_bits: analog.then(|| bits.total_bits()),
            solves_by_bits: delta.solves_by_bits,
        });
        if opts.stop_when_fit && train_eval.accuracy == 1.0 && epoch < cfg.train.epochs() {
            status = RunStatus::Stopped;
            break;
        }
    }

    let test_eval = evaluate(&model, &data.test)?;
    Ok(TrainRecord {
        header: RunHeader {
            version: version_string(),
            config_sha256: cfg.sha256(),
            seed: cfg.train.seed,
            optimizer,
            dataset: data.description.clone(),
        },
        rows,
        update_errors,
        statistics: stepper.statistics(),
        warnings,
        status,
        abort_error,
        test_features: test_eval.features,
        test_labels: data.test.labels.clone(),
        model,
    })
}

/// Loads data, trains, and writes `metrics.csv`, `summary.json` and
/// `features.csv` into `out_dir`. Outputs are written for aborted runs
/// too, before the error is returned.
pub fn run_training(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainRecord> {
    let data = load_datasets(cfg)?;
    let mut record = train(cfg, &data, &TrainOptions::default())?;
    emit_metrics(&record, out_dir)?;
    if let (RunStatus::Aborted { epoch, step, .. }, Some(source)) = (&record.status, record.abort_error.take()) {
        return Err(Error::Training {
            epoch: *epoch,
            step: *step,
            source: Box::new(source),
        });
    }
    Ok(record)
}
