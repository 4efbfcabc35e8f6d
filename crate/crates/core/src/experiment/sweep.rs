use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OptimizerKind};
use super::train::{train, Datasets, TrainOptions};
use crate::error::Result;

/// One hyperparameter setting. Fields an optimizer does not use are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub momentum: Option<f64>,
    pub damping: Option<f64>,
}

impl Hyperparameters {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        match cfg.train.optimizer {
            OptimizerKind::KfacAmc | OptimizerKind::KfacExact => {
                cfg.kfac.learning_rate = self.learning_rate;
                if let Some(d) = self.damping {
                    cfg.kfac.damping = d;
                }
            }
            OptimizerKind::Sgdm => {
                cfg.sgdm.learning_rate = self.learning_rate;
                if let Some(m) = self.momentum {
                    cfg.sgdm.momentum = m;
                }
            }
            OptimizerKind::Adam => cfg.adam.learning_rate = self.learning_rate,
        }
    }
}

fn or_default(grid: &[f64], value: f64) -> Vec<f64> {
    if grid.is_empty() {
        vec![value]
    } else {
        grid.to_vec()
    }
}

/// The grid for `cfg.train.optimizer` from the `[sweep]` section.
pub fn grid(cfg: &ExperimentConfig) -> Vec<Hyperparameters> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    match cfg.train.optimizer {
        OptimizerKind::KfacAmc | OptimizerKind::KfacExact => {
            for lr in or_default(&s.kfac_learning_rate, cfg.kfac.learning_rate) {
                for d in or_default(&s.kfac_damping, cfg.kfac.damping) {
                    out.push(Hyperparameters {
                        learning_rate: lr,
                        momentum: None,
                        damping: Some(d),
                    });
                }
            }
        }
        OptimizerKind::Sgdm => {
            for lr in or_default(&s.sgdm_learning_rate, cfg.sgdm.learning_rate) {
                for m in or_default(&s.sgdm_momentum, cfg.sgdm.momentum) {
                    out.push(Hyperparameters {
                        learning_rate: lr,
                        momentum: Some(m),
                        damping: None,
                    });
                }
            }
        }
        OptimizerKind::Adam => {
            for lr in or_default(&s.adam_learning_rate, cfg.adam.learning_rate) {
                out.push(Hyperparameters {
                    learning_rate: lr,
                    momentum: None,
                    damping: None,
                });
            }
        }
    }
    out
}

/// Median of epochs-to-fit with unfit runs ranked last; `None` when the
/// median run never fit.
pub fn median_epochs(epochs: &[Option<usize>]) -> Option<f64> {
    if epochs.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = epochs.iter().map(|e| e.map_or(f64::INFINITY, |x| x as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    m.is_finite().then_some(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub hyperparameters: Hyperparameters,
    pub seeds: Vec<u64>,
    pub epochs_to_fit: Vec<Option<usize>>,
    pub median_epochs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub optimizer: OptimizerKind,
    pub cells: Vec<SweepCell>,
    /// See [`best_cell`].
    pub best: usize,
}

impl SweepResult {
    pub fn best_cell(&self) -> &SweepCell {
        &self.cells[self.best]
    }
}

/// Index of the cell with the fewest unfit runs, then the lowest median
/// epochs-to-fit, then the lowest mean with unfit runs counted as
/// `limit + 1`; remaining ties go to grid order.
pub fn best_cell(cells: &[SweepCell], limit: usize) -> usize {
    let score = |c: &SweepCell| {
        let unfit = c.epochs_to_fit.iter().filter(|e| e.is_none()).count();
        let mean = c.epochs_to_fit.iter().map(|e| e.unwrap_or(limit + 1) as f64).sum::<f64>();
        (unfit, c.median_epochs.unwrap_or(f64::INFINITY), mean)
    };
    (0..cells.len())
        .min_by(|&i, &j| {
            let (a, b) = (score(&cells[i]), score(&cells[j]));
            a.0.cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
                .then(i.cmp(&j))
        })
        .unwrap_or(0)
}

/// Trains every grid cell for every seed, stopping each run once it fits
/// the training set.
pub fn sweep(base: &ExperimentConfig, data: &Datasets, seeds: &[u64]) -> Result<SweepResult> {
    let opts = TrainOptions { stop_when_fit: true };
    let limit = base.train.epochs();
    let mut cells = Vec::new();
    for hp in grid(base) {
        let mut epochs_to_fit = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            hp.apply(&mut cfg);
            epochs_to_fit.push(train(&cfg, data, &opts)?.epochs_to_full_accuracy());
        }
        cells.push(SweepCell {
            median_epochs: median_epochs(&epochs_to_fit),
            hyperparameters: hp,
            seeds: seeds.to_vec(),
            epochs_to_fit,
        });
    }
    let best = best_cell(&cells, limit);
    Ok(SweepResult {
        optimizer: base.train.optimizer,
        cells,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_ranks_unfit_last() {
        assert_eq!(median_epochs(&[Some(3), None, Some(5), Some(1), None]), Some(5.0));
        assert_eq!(median_epochs(&[Some(3), None, None]), None);
        assert_eq!(median_epochs(&[Some(2), Some(4)]), Some(3.0));
        assert_eq!(median_epochs(&[]), None);
    }

    fn cell(epochs: &[Option<usize>]) -> SweepCell {
        SweepCell {
            hyperparameters: Hyperparameters {
                learning_rate: 1.0,
                momentum: None,
                damping: None,
            },
            seeds: (0..epochs.len() as u64).collect(),
            epochs_to_fit: epochs.to_vec(),
            median_epochs: median_epochs(epochs),
        }
    }

    #[test]
    fn best_cell_prefers_consistent_fits() {
        let cells = [
            cell(&[Some(2), Some(3), None]),
            cell(&[Some(5), Some(5), Some(6)]),
            cell(&[Some(4), Some(5), Some(7)]),
            cell(&[Some(5), Some(5), Some(5)]),
        ];
        assert_eq!(best_cell(&cells, 50), 3);
        assert_eq!(best_cell(&cells[..3], 50), 1);
        assert_eq!(best_cell(&cells[..1], 50), 0);
    }

    #[test]
    fn grids_default_to_configured_values() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(grid(&cfg).len(), 1);
        cfg.sweep.kfac_learning_rate = vec![0.1, 0.2];
        cfg.sweep.kfac_damping = vec![0.01, 0.03, 0.1];
        assert_eq!(grid(&cfg).len(), 6);
        cfg.train.optimizer = OptimizerKind::Adam;
        cfg.sweep.adam_learning_rate = vec![1e-3, 1e-2];
        let g = grid(&cfg);
        assert_eq!(g.len(), 2);
        let mut c2 = cfg.clone();
        g[1].apply(&mut c2);
        assert_eq!(c2.adam.learning_rate, 1e-2);
    }
}
