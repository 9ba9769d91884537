use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apanet::ablation::{run_ablation, AblationReport, Suite};
use apanet::config::RunConfig;
use apanet::experiments::{checkpoint_path, run_eval, run_train};
use apanet::plots::{emit_plots, partition_figure, prediction_grid};
use apanet::report::write_table;
use apanet::{Error, Result};
use apanet_core::data::{sample_episode, Phase};
use apanet_core::head::{PartitionStrategy, PrototypeSource};
use apanet_core::ChaCha8Rng;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "apanet", version, about = "Few-shot segmentation with two-branch prototype alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the base classes of a fold.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train every fold in turn.
        #[arg(long)]
        all_folds: bool,
        /// Continue from the fold's checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Resume even if the checkpoint was produced under another config.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on novel-class episodes.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate; defaults to the fold's checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate every fold in turn using the per-fold checkpoints.
        #[arg(long)]
        all_folds: bool,
        /// Evaluate even if the checkpoint was produced under another config.
        #[arg(long)]
        force: bool,
    },
    /// Run ablation grids over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Suites to run; all four when omitted.
        #[arg(long, value_enum)]
        suite: Vec<Suite>,
        /// Seeds per cell.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Render ablation curves and partition / prediction figures.
    Plot {
        #[command(flatten)]
        run: RunArgs,
        /// Ablation reports to plot; defaults to every `ablation.*.json` in the output directory.
        #[arg(long)]
        report: Vec<PathBuf>,
        /// Number of episodes in the prediction grid.
        #[arg(long, default_value_t = 4)]
        grid: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Kmeans,
    Spp,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Query,
    Support,
}

/// Overrides applied on top of `--config` (or the defaults).
#[derive(Args)]
struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    num_folds: Option<usize>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    bias_rate: Option<f64>,
    #[arg(long)]
    distractor_rate: Option<f64>,
    #[arg(long)]
    head_width: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of k-means clusters `n`.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    #[arg(long, value_enum)]
    partition: Option<PartitionArg>,
    /// SPP level `a` (bins per side); implies `--partition spp`.
    #[arg(long)]
    spp_level: Option<usize>,
    #[arg(long, value_enum)]
    proto_source: Option<SourceArg>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_shot_train: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Support shots at evaluation.
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            output_dir => c.output_dir,
            num_classes => c.dataset.num_classes,
            num_folds => c.dataset.num_folds,
            fold => c.dataset.fold,
            image_size => c.dataset.image_size,
            bias_rate => c.dataset.bias_rate,
            distractor_rate => c.dataset.distractor_rate,
            head_width => c.model.head_width,
            lambda => c.method.lambda,
            clusters => c.method.clusters,
            kmeans_iters => c.method.kmeans_iters,
            steps => c.training.steps,
            lr => c.training.lr,
            momentum => c.training.momentum,
            batch => c.training.batch,
            seed => c.training.seed,
            k_shot_train => c.training.k_shot_train,
            checkpoint_every => c.training.checkpoint_every,
            k_shot => c.eval.k_shot,
            episodes => c.eval.episodes,
            eval_seed => c.eval.seed,
        }
        match (self.partition, self.spp_level) {
            (Some(PartitionArg::Kmeans), Some(_)) => {
                return Err(Error::Config("--spp-level conflicts with --partition kmeans".into()))
            }
            (Some(PartitionArg::Kmeans), None) => c.method.partition = PartitionStrategy::KMeans,
            (_, Some(level)) => c.method.partition = PartitionStrategy::Spp { level },
            (Some(PartitionArg::Spp), None) => {
                if c.method.partition == PartitionStrategy::KMeans {
                    c.method.partition = PartitionStrategy::Spp { level: 2 };
                }
            }
            (None, None) => {}
        }
        match self.proto_source {
            Some(SourceArg::Query) => c.method.source = PrototypeSource::Query,
            Some(SourceArg::Support) => c.method.source = PrototypeSource::Support,
            None => {}
        }
        if c.output_dir.as_os_str().is_empty() {
            c.output_dir = PathBuf::from("runs");
        }
        c.validate()?;
        Ok(c)
    }
}

fn folds(cfg: &RunConfig, all: bool) -> Vec<RunConfig> {
    if !all {
        return vec![cfg.clone()];
    }
    (0..cfg.dataset.num_folds)
        .map(|f| {
            let mut c = cfg.clone();
            c.dataset.fold = f;
            c
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, all_folds, resume, force } => {
            let cfg = run.resolve()?;
            for c in folds(&cfg, all_folds) {
                let out = run_train(&c, resume, force)?;
                let last = out.log.last();
                println!(
                    "fold {}: {} steps, {} skipped, final loss {}, checkpoint {}",
                    c.dataset.fold,
                    last.map_or(0, |l| l.step),
                    last.map_or(0, |l| l.skipped),
                    last.and_then(|l| l.loss).map_or("n/a".to_string(), |l| format!("{l:.4}")),
                    out.checkpoint.display()
                );
            }
        }
        Command::Eval { run, checkpoint, all_folds, force } => {
            let cfg = run.resolve()?;
            if all_folds && checkpoint.is_some() {
                return Err(Error::Config("--checkpoint cannot be combined with --all-folds".into()));
            }
            let mut reports = Vec::new();
            for c in folds(&cfg, all_folds) {
                let path = checkpoint.clone().unwrap_or_else(|| checkpoint_path(&c));
                let report = run_eval(&path, &c, force)?;
                let json = report.write(&c.output_dir)?;
                println!(
                    "fold {} {}-shot: mIoU {:.4}  FB-IoU {:.4}  ({} episodes) -> {}",
                    report.fold,
                    report.k_shot,
                    report.miou,
                    report.fbiou,
                    report.n_episodes,
                    json.display()
                );
                reports.push(report);
            }
            if reports.len() > 1 {
                let mean = reports.iter().map(|r| r.miou).sum::<f64>() / reports.len() as f64;
                println!("mean mIoU over folds: {mean:.4}");
            }
            write_table(&reports, &cfg.output_dir)?;
        }
        Command::Ablate { run, suite, seeds } => {
            let cfg = run.resolve()?;
            let suites = if suite.is_empty() { Suite::ALL.to_vec() } else { suite };
            let mut reports = Vec::new();
            for s in suites {
                let report = run_ablation(s, &cfg, seeds, |r| match (r.miou, &r.error) {
                    (Some(m), _) => eprintln!("{} {} seed {}: mIoU {m:.4}", s.name(), r.cell, r.seed),
                    (None, Some(e)) => eprintln!("{} {} seed {}: failed: {e}", s.name(), r.cell, r.seed),
                    (None, None) => {}
                })?;
                report.write(&cfg.output_dir)?;
                for c in &report.cells {
                    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                    println!(
                        "{:<14} {:<12} median {}  IQR [{}, {}]  ok {} failed {}",
                        s.name(),
                        c.cell,
                        fmt(c.median),
                        fmt(c.q1),
                        fmt(c.q3),
                        c.n_ok,
                        c.n_failed
                    );
                }
                reports.push(report);
            }
            for p in emit_plots(&reports, &cfg.output_dir)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Plot { run, report, grid } => {
            let cfg = run.resolve()?;
            let paths = if report.is_empty() { find_reports(&cfg.output_dir)? } else { report };
            let reports = paths.iter().map(|p| AblationReport::read(p)).collect::<Result<Vec<_>>>()?;
            if !reports.is_empty() {
                for p in emit_plots(&reports, &cfg.output_dir)? {
                    println!("wrote {}", p.display());
                }
            }
            for p in figures(&cfg, grid)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn find_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("ablation.") && name.ends_with(".json")
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Partition and prediction figures for the configured fold, using its
/// checkpoint when one exists and a fresh initialisation otherwise.
fn figures(cfg: &RunConfig, grid: usize) -> Result<Vec<PathBuf>> {
    let ckpt = checkpoint_path(cfg);
    let model = if ckpt.exists() {
        apanet::checkpoint::Checkpoint::load(&ckpt)?.session.state.model
    } else {
        apanet_core::head::Model::init(cfg.backbone(), cfg.model.head_width, cfg.training.seed)?
    };
    let split = cfg.split()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let episodes = (0..grid.max(1))
        .map(|_| sample_episode(&split, Phase::Test, &cfg.episodes(cfg.eval.k_shot), &mut rng))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let fold = cfg.dataset.fold;
    let part = cfg.output_dir.join(format!("partitions.{fold}.png"));
    let clusters = cfg.method.clusters.max(1);
    partition_figure(&episodes[0], &model, clusters, cfg.method.kmeans_iters, &[2, 3, 4, 5], &mut rng)?.write_png(&part)?;
    let preds = cfg.output_dir.join(format!("predictions.{fold}.png"));
    prediction_grid(&episodes, &model)?.write_png(&preds)?;
    Ok(vec![part, preds])
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
