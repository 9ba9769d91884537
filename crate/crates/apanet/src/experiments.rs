//! Training and evaluation drivers.

use std::path::{Path, PathBuf};
use std::time::Instant;

use apanet_core::data::{sample_episode, Phase};
use apanet_core::head::{infer, train_batch, Model, TrainState};
use apanet_core::metrics::{ConfusionCounts, FbCounts};
use apanet_core::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::{write_csv, MetricsReport};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: Option<f64>,
    pub skipped: u64,
    pub wall_ms: f64,
}

/// Training state plus the episode sampler's stream; together they fully
/// determine the rest of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub state: TrainState,
    pub data_rng: ChaCha8Rng,
}

impl Session {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.training.seed;
        let model = Model::init(cfg.backbone(), cfg.model.head_width, seed)?;
        let state = TrainState::new(model, seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5151);
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
        data_rng.set_stream(1);
        Ok(Self { state, data_rng })
    }

    /// Runs one optimiser step on freshly sampled training episodes.
    pub fn step(&mut self, cfg: &RunConfig) -> Result<StepLog> {
        let split = cfg.split()?;
        let ep_cfg = cfg.episodes(cfg.training.k_shot_train);
        let start = Instant::now();
        let episodes = (0..cfg.training.batch)
            .map(|_| sample_episode(&split, Phase::Train, &ep_cfg, &mut self.data_rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let report = train_batch(&mut self.state, &episodes, &cfg.method, &cfg.optim())?;
        Ok(StepLog {
            step: self.state.step,
            loss: report.loss,
            skipped: self.state.skipped,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains until `cfg.training.steps` optimiser steps have been applied.
    /// Steps where every episode was skipped do not count.
    pub fn train_to(&mut self, cfg: &RunConfig, mut on_step: impl FnMut(&StepLog, &Session)) -> Result<()> {
        let mut attempts = 0u64;
        while self.state.step < cfg.training.steps {
            attempts += 1;
            if attempts > cfg.training.steps.saturating_mul(4) + 16 {
                return Err(Error::Config("too many skipped training steps".into()));
            }
            let log = self.step(cfg)?;
            on_step(&log, self);
        }
        Ok(())
    }
}

/// Trains a fresh model for the configured number of steps.
pub fn train_in_memory(cfg: &RunConfig) -> Result<Session> {
    let mut session = Session::new(cfg)?;
    session.train_to(cfg, |_, _| {})?;
    Ok(session)
}

/// Pooled evaluation counts over the test episodes of one fold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub fb: FbCounts,
    pub episodes: usize,
}

/// Evaluates on `cfg.eval.episodes` novel-class episodes drawn from
/// `cfg.eval.seed`, so different models see the same episodes.
pub fn evaluate(model: &Model, cfg: &RunConfig, k_shot: usize) -> Result<Evaluation> {
    evaluate_phase(model, cfg, k_shot, Phase::Test)
}

/// Like [`evaluate`], but `Phase::Train` scores base-class episodes instead.
pub fn evaluate_phase(model: &Model, cfg: &RunConfig, k_shot: usize, phase: Phase) -> Result<Evaluation> {
    let split = cfg.split()?;
    let ep_cfg = cfg.episodes(k_shot);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    rng.set_stream(2 + cfg.dataset.fold as u64);
    let mut out = Evaluation::default();
    for _ in 0..cfg.eval.episodes {
        let ep = sample_episode(&split, phase, &ep_cfg, &mut rng)?;
        let support: Vec<_> = ep.support.iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
        let pred = infer(&support, &ep.query.image, model)?;
        out.counts.accumulate(&pred, &ep.query.mask, ep.class_id)?;
        out.fb.accumulate(&pred, &ep.query.mask)?;
        out.episodes += 1;
    }
    Ok(out)
}

impl Evaluation {
    pub fn miou(&self, novel: &[usize]) -> Result<f64> {
        Ok(self.counts.miou(novel)?)
    }
}

/// Files produced by [`run_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<StepLog>,
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(format!("checkpoint.{}.bin", cfg.dataset.fold))
}

/// Trains on the base classes of the configured fold, writing
/// `config.toml`, `train_log.<fold>.csv`, and `checkpoint.<fold>.bin` to
/// the output directory. The checkpoint is rewritten every
/// `checkpoint_every` steps and at the end.
///
/// With `resume`, training continues from an existing checkpoint, which
/// must match the config's fingerprint unless `force` is set. A
/// non-finite loss aborts the run and leaves the last good checkpoint in
/// place.
pub fn run_train(cfg: &RunConfig, resume: bool, force: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let ckpt_path = checkpoint_path(cfg);
    let mut session = if resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        ck.check_compatible(cfg, force)?;
        ck.session
    } else {
        Session::new(cfg)?
    };
    let save = |s: &Session| Checkpoint::capture(s, cfg).save(&ckpt_path);
    save(&session)?;
    let mut log = Vec::new();
    let mut last_saved = session.state.step;
    let mut pending: Option<Error> = None;
    let every = cfg.training.checkpoint_every;
    let result = session.train_to(cfg, |entry, s| {
        log.push(entry.clone());
        if pending.is_none() && every > 0 && s.state.step % every == 0 && s.state.step != last_saved {
            last_saved = s.state.step;
            if let Err(e) = save(s) {
                pending = Some(e);
            }
        }
    });
    let log_path = dir.join(format!("train_log.{}.csv", cfg.dataset.fold));
    write_csv(&log_path, &log)?;
    if let Some(e) = pending {
        return Err(e);
    }
    match result {
        Err(Error::Core(apanet_core::Error::NonFinite(_))) => {
            return Err(Error::Diverged { step: session.state.step + 1, kept: ckpt_path.display().to_string() })
        }
        Err(e) => return Err(e),
        Ok(()) => {}
    }
    save(&session)?;
    Ok(TrainOutcome { checkpoint: ckpt_path, log_path, log })
}

/// Evaluates a checkpoint on novel-class episodes of the configured fold
/// with `cfg.eval.k_shot` shots.
pub fn run_eval(checkpoint: &Path, cfg: &RunConfig, force: bool) -> Result<MetricsReport> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_compatible(cfg, force)?;
    let split = cfg.split()?;
    let eval = evaluate(&ck.session.state.model, cfg, cfg.eval.k_shot)?;
    MetricsReport::from_evaluation(&eval, &split.novel_ids, cfg.dataset.fold, cfg.eval.k_shot, cfg.eval.seed, ck.header.fingerprint)
}
