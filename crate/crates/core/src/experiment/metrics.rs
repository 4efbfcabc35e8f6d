use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{RunHeader, RunStatus, TrainRecord};
use crate::blockamc::SolveStatistics;
use crate::error::{Error, Result};
use crate::nn::FEATURES;

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "mean_update_rel_err",
    "lp_vector_outputs",
    "hp_solves",
    "mean_refinement_iters",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub header: RunHeader,
    #[serde(flatten)]
    pub status: RunStatus,
    pub epochs_completed: usize,
    pub epochs_to_full_train_accuracy: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub update_vectors: usize,
    pub mean_update_rel_err: Option<f64>,
    pub counters: SolveStatistics,
    /// Precision of the refinement solves, by epoch.
    pub precision_bits_by_epoch: BTreeMap<usize, u32>,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn from_record(record: &TrainRecord) -> Self {
        let last = record.final_row();
        RunSummary {
            header: record.header.clone(),
            status: record.status.clone(),
            epochs_completed: record.rows.len(),
            epochs_to_full_train_accuracy: record.epochs_to_full_accuracy(),
            final_train_loss: last.map(|r| r.train_loss),
            final_train_acc: last.map(|r| r.train_acc),
            final_test_acc: last.map(|r| r.test_acc),
            update_vectors: record.update_vector_count(),
            mean_update_rel_err: record.mean_update_error(),
            counters: record.statistics.clone(),
            precision_bits_by_epoch: record
                .rows
                .iter()
                .filter_map(|r| r.precision_bits.map(|b| (r.epoch, b)))
                .collect(),
            warnings: record.warnings.clone(),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_metrics_csv(record: &TrainRecord, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in &record.rows {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            r.test_acc.to_string(),
            opt(r.mean_update_rel_err),
            r.lp_vector_outputs.to_string(),
            r.hp_solves.to_string(),
            opt(r.mean_refinement_iters),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_features_csv(record: &TrainRecord, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<String> = ["sample_id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..FEATURES).map(|k| format!("f{k}")))
        .collect();
    w.write_record(&header)?;
    for (i, &label) in record.test_labels.iter().enumerate() {
        let row: Vec<String> = [i.to_string(), label.to_string()]
            .into_iter()
            .chain(record.test_features.row(i).iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `summary.json` and `features.csv`.
pub fn emit_metrics(record: &TrainRecord, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_metrics_csv(record, &out_dir.join("metrics.csv"))?;
    write_json(&RunSummary::from_record(record), &out_dir.join("summary.json"))?;
    write_features_csv(record, &out_dir.join("features.csv"))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
