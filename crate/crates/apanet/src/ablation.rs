//! Ablation grids over seeds with median and interquartile range.

use std::path::{Path, PathBuf};

use apanet_core::head::{PartitionStrategy, PrototypeSource};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{evaluate, train_in_memory};
use crate::report::write_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Suite {
    NSweep,
    LambdaSweep,
    Partition,
    ProtoSource,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::NSweep, Suite::LambdaSweep, Suite::Partition, Suite::ProtoSource];

    pub fn name(self) -> &'static str {
        match self {
            Suite::NSweep => "n_sweep",
            Suite::LambdaSweep => "lambda_sweep",
            Suite::Partition => "partition",
            Suite::ProtoSource => "proto_source",
        }
    }

    /// The grid of this suite applied on top of `base`.
    pub fn cells(self, base: &RunConfig) -> Vec<Cell> {
        let with = |label: String, x: f64, f: &dyn Fn(&mut RunConfig)| {
            let mut config = base.clone();
            f(&mut config);
            Cell { label, x, config }
        };
        match self {
            Suite::NSweep => (0..=5)
                .map(|n| with(format!("n={n}"), n as f64, &|c| c.method.clusters = n))
                .collect(),
            Suite::LambdaSweep => [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]
                .into_iter()
                .map(|l| with(format!("lambda={l}"), l, &|c| c.method.lambda = l))
                .collect(),
            Suite::Partition => {
                let mut cells = vec![with("kmeans n=3".into(), 0.0, &|c| {
                    c.method.partition = PartitionStrategy::KMeans;
                    c.method.clusters = 3;
                })];
                cells.extend((2..=5).map(|a| {
                    with(format!("spp a={a}"), a as f64, &|c| c.method.partition = PartitionStrategy::Spp { level: a })
                }));
                cells
            }
            Suite::ProtoSource => vec![
                with("baseline".into(), 0.0, &|c| c.method.lambda = 0.0),
                with("support n=1".into(), 1.0, &|c| {
                    c.method.source = PrototypeSource::Support;
                    c.method.partition = PartitionStrategy::KMeans;
                    c.method.clusters = 1;
                }),
                with("query n=1".into(), 2.0, &|c| {
                    c.method.source = PrototypeSource::Query;
                    c.method.partition = PartitionStrategy::KMeans;
                    c.method.clusters = 1;
                }),
                with("query n=3".into(), 3.0, &|c| {
                    c.method.source = PrototypeSource::Query;
                    c.method.partition = PartitionStrategy::KMeans;
                    c.method.clusters = 3;
                }),
            ],
        }
    }
}

/// One configuration of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    /// Position on the plot axis.
    pub x: f64,
    pub config: RunConfig,
}

/// Outcome of one (cell, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub cell: String,
    pub seed: u64,
    pub miou: Option<f64>,
    pub fbiou: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub x: f64,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub fold: usize,
    pub k_shot: usize,
    pub seeds: Vec<u64>,
    pub n_episodes: usize,
    pub train_steps: u64,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<SeedResult>,
}

/// Linear-interpolation quantile of sorted data (the common "type 7").
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarise(cell: &Cell, runs: &[SeedResult]) -> CellSummary {
    let mut ok: Vec<f64> = runs.iter().filter_map(|r| r.miou).collect();
    ok.sort_by(f64::total_cmp);
    let stat = |q| (!ok.is_empty()).then(|| quantile(&ok, q));
    CellSummary {
        cell: cell.label.clone(),
        x: cell.x,
        median: stat(0.5),
        q1: stat(0.25),
        q3: stat(0.75),
        n_ok: ok.len(),
        n_failed: runs.len() - ok.len(),
    }
}

/// Trains and evaluates one cell for one seed.
pub fn run_cell(cell: &Cell, seed: u64) -> SeedResult {
    let mut cfg = cell.config.clone();
    cfg.training.seed = seed;
    let outcome = (|| -> Result<(f64, f64)> {
        let session = train_in_memory(&cfg)?;
        let eval = evaluate(&session.state.model, &cfg, cfg.eval.k_shot)?;
        Ok((eval.miou(&cfg.split()?.novel_ids)?, eval.fb.fbiou()))
    })();
    match outcome {
        Ok((m, f)) => SeedResult { cell: cell.label.clone(), seed, miou: Some(m), fbiou: Some(f), error: None },
        Err(e) => SeedResult { cell: cell.label.clone(), seed, miou: None, fbiou: None, error: Some(e.to_string()) },
    }
}

/// Runs every cell of `suite` for `seeds` consecutive seeds starting at
/// `base.training.seed`. Failed runs are recorded and do not stop the suite.
pub fn run_ablation(
    suite: Suite,
    base: &RunConfig,
    seeds: usize,
    mut progress: impl FnMut(&SeedResult),
) -> Result<AblationReport> {
    base.validate()?;
    if seeds == 0 {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base.training.seed + i).collect();
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for cell in suite.cells(base) {
        let cell_runs: Vec<SeedResult> = seed_list
            .iter()
            .map(|&s| {
                let r = run_cell(&cell, s);
                progress(&r);
                r
            })
            .collect();
        cells.push(summarise(&cell, &cell_runs));
        runs.extend(cell_runs);
    }
    Ok(AblationReport {
        suite,
        fold: base.dataset.fold,
        k_shot: base.eval.k_shot,
        seeds: seed_list,
        n_episodes: base.eval.episodes,
        train_steps: base.training.steps,
        cells,
        runs,
    })
}

impl AblationReport {
    pub fn stem(&self) -> String {
        format!("ablation.{}.{}", self.suite.name(), self.fold)
    }

    /// Writes `<stem>.json`, `<stem>.csv` (one row per cell), and
    /// `<stem>.runs.csv` (one row per seed).
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{}.json", self.stem()));
        let text = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        let table = dir.join(format!("{}.csv", self.stem()));
        write_csv(&table, &self.cells)?;
        let runs = dir.join(format!("{}.runs.csv", self.stem()));
        write_csv(&runs, &self.runs)?;
        Ok(vec![json, table, runs])
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
