//! Evaluation records and their on-disk forms.
//!
//! `metrics.<fold>.json` holds one [`MetricsReport`]; `table.csv` holds one
//! [`ClassRow`] per evaluated (fold, class). Field names are part of the output
//! contract and are listed in the README.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use apanet_core::metrics::{Counts, FbCounts};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::Evaluation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold: usize,
    pub k_shot: usize,
    pub n_episodes: usize,
    pub eval_seed: u64,
    pub fingerprint: String,
    pub per_class_iou: BTreeMap<usize, f64>,
    pub per_class_counts: BTreeMap<usize, Counts>,
    pub miou: f64,
    pub fbiou: f64,
    pub fb_counts: FbCounts,
}

/// One row of `table.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub fold: usize,
    pub k_shot: usize,
    pub class_id: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou: f64,
}

impl MetricsReport {
    pub fn from_evaluation(
        eval: &Evaluation,
        novel: &[usize],
        fold: usize,
        k_shot: usize,
        eval_seed: u64,
        fingerprint: String,
    ) -> Result<Self> {
        let miou = eval.miou(novel)?;
        let per_class_iou = novel
            .iter()
            .map(|&c| (c, eval.counts.iou(c).expect("miou checked every class")))
            .collect();
        let per_class_counts = novel.iter().map(|&c| (c, eval.counts.per_class[&c])).collect();
        Ok(Self {
            fold,
            k_shot,
            n_episodes: eval.episodes,
            eval_seed,
            fingerprint,
            per_class_iou,
            per_class_counts,
            miou,
            fbiou: eval.fb.fbiou(),
            fb_counts: eval.fb,
        })
    }

    pub fn rows(&self) -> Vec<ClassRow> {
        self.per_class_counts
            .iter()
            .map(|(&class_id, c)| ClassRow {
                fold: self.fold,
                k_shot: self.k_shot,
                class_id,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                iou: self.per_class_iou[&class_id],
            })
            .collect()
    }

    pub fn json_path(dir: &Path, fold: usize) -> PathBuf {
        dir.join(format!("metrics.{fold}.json"))
    }

    /// Writes `metrics.<fold>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = Self::json_path(dir, self.fold);
        let text = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        Ok(json)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Writes `table.csv` with one row per (report, class).
pub fn write_table(reports: &[MetricsReport], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("table.csv");
    let rows: Vec<ClassRow> = reports.iter().flat_map(MetricsReport::rows).collect();
    write_csv(&path, &rows)?;
    Ok(path)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
