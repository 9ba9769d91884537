//! End-to-end behaviour of the training, evaluation, and reporting drivers.

use apanet::ablation::{run_ablation, Suite};
use apanet::checkpoint::Checkpoint;
use apanet::config::RunConfig;
use apanet::experiments::{evaluate, run_eval, run_train, train_in_memory, Session};
use apanet::plots::{emit_plots, partition_overlay, RgbImage, REGION_COLORS};
use apanet::report::{write_table, MetricsReport};
use apanet::Error;
use apanet_core::data::{sample_episode, Phase};
use apanet_core::head::Model;
use apanet_core::metrics::ConfusionCounts;
use apanet_core::prototypes::{remove_foreground, spp_partition};
use apanet_core::{ChaCha8Rng, Mask, Params};
use rand::SeedableRng;

fn small(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.image_size = 16;
    cfg.model.widths = [4, 5, 5, 6];
    cfg.model.head_width = 6;
    cfg.training.steps = 10;
    cfg.training.checkpoint_every = 4;
    cfg.eval.episodes = 12;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let first = run_train(&cfg, false, false).unwrap();
    let bytes = std::fs::read(&first.checkpoint).unwrap();
    let second = run_train(&cfg, false, false).unwrap();
    assert_eq!(std::fs::read(&second.checkpoint).unwrap(), bytes);
    assert_eq!(first.log.len(), second.log.len());
    assert!(first.log.iter().zip(&second.log).all(|(x, y)| x.loss == y.loss && x.skipped == y.skipped));
    assert_eq!(first.log.last().unwrap().step, 10);
}

#[test]
fn zero_steps_checkpoints_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.training.steps = 0;
    let out = run_train(&cfg, false, false).unwrap();
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    let init = Model::init(cfg.backbone(), cfg.model.head_width, cfg.training.seed).unwrap();
    assert_eq!(ck.session.state.model, init);
    assert_eq!(ck.header.step, 0);
    assert!(out.log.is_empty());
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let full = small(full_dir.path());
    let straight = Checkpoint::load(&run_train(&full, false, false).unwrap().checkpoint).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut part = small(part_dir.path());
    part.training.steps = 6;
    run_train(&part, false, false).unwrap();
    part.training.steps = 10;
    let resumed = Checkpoint::load(&run_train(&part, true, false).unwrap().checkpoint).unwrap();
    assert_eq!(resumed.session, straight.session);
    for (a, b) in resumed.session.state.model.flatten().iter().zip(straight.session.state.model.flatten()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn resume_refuses_a_foreign_checkpoint_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_train(&cfg, false, false).unwrap();
    let mut other = cfg.clone();
    other.method.lambda = 0.2;
    other.training.steps = 12;
    let err = run_train(&other, true, false).unwrap_err();
    assert!(matches!(err, Error::Fingerprint { .. }));
    assert_eq!(err.exit_code(), 1);
    run_train(&other, true, true).unwrap();
}

#[test]
fn periodic_checkpoints_track_progress() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.training.steps = 8;
    let mut seen = Vec::new();
    let mut s = Session::new(&cfg).unwrap();
    s.train_to(&cfg, |log, _| seen.push(log.step)).unwrap();
    assert_eq!(*seen.last().unwrap(), 8);
    let out = run_train(&cfg, false, false).unwrap();
    let log = std::fs::read_to_string(&out.log_path).unwrap();
    assert!(log.starts_with("step,loss,skipped,wall_ms\n"));
    assert_eq!(log.lines().count(), out.log.len() + 1);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let cfg = small(&blocker.join("sub"));
    let err = run_train(&cfg, false, false).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn evaluation_is_repeatable_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let ck = run_train(&cfg, false, false).unwrap().checkpoint;
    let a = run_eval(&ck, &cfg, false).unwrap();
    let b = run_eval(&ck, &cfg, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_episodes, 12);
    let novel = cfg.split().unwrap().novel_ids;
    let mean = novel.iter().map(|c| a.per_class_iou[c]).sum::<f64>() / novel.len() as f64;
    assert!((a.miou - mean).abs() < 1e-15);
    let mut other = cfg.clone();
    other.dataset.bias_rate = 0.1;
    assert!(matches!(run_eval(&ck, &other, false), Err(Error::Fingerprint { .. })));
    run_eval(&ck, &other, true).unwrap();
}

#[test]
fn report_files_follow_the_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let ck = run_train(&cfg, false, false).unwrap().checkpoint;
    let report = run_eval(&ck, &cfg, false).unwrap();
    let json_path = report.write(dir.path()).unwrap();
    assert_eq!(json_path.file_name().unwrap(), "metrics.0.json");
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        [
            "eval_seed",
            "fb_counts",
            "fbiou",
            "fingerprint",
            "fold",
            "k_shot",
            "miou",
            "n_episodes",
            "per_class_counts",
            "per_class_iou"
        ]
    );
    let counts = &value["per_class_counts"]["0"];
    assert!(counts["tp"].is_u64() && counts["fp"].is_u64() && counts["fn"].is_u64());
    assert!(value["fb_counts"]["foreground"]["tp"].is_u64());
    assert_eq!(MetricsReport::read(&json_path).unwrap(), report);

    let table = write_table(&[report.clone()], dir.path()).unwrap();
    let text = std::fs::read_to_string(table).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "fold,k_shot,class_id,tp,fp,fn,iou");
    assert_eq!(lines.count(), report.per_class_iou.len());
}

#[test]
fn ablation_records_failures_and_emits_curves() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.training.steps = 2;
    let report = run_ablation(Suite::Partition, &cfg, 2, |_| {}).unwrap();
    assert_eq!(report.cells.len(), 5);
    assert_eq!(report.runs.len(), 10);
    // A 16x16 image gives a 4x4 feature grid, so SPP level 5 is impossible:
    // that cell fails on every seed while the suite still completes.
    let last = report.cells.last().unwrap();
    assert_eq!((last.cell.as_str(), last.n_ok, last.n_failed), ("spp a=5", 0, 2));
    assert!(report.cells[..4].iter().all(|c| c.n_ok == 2 && c.median.is_some()));
    let files = report.write(dir.path()).unwrap();
    assert!(files.iter().all(|p| p.exists()));
    let text = std::fs::read_to_string(&files[1]).unwrap();
    assert_eq!(text.lines().next().unwrap(), "cell,x,median,q1,q3,n_ok,n_failed");
    let plots = emit_plots(&[report], dir.path()).unwrap();
    let svg = std::fs::read_to_string(&plots[0]).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("partition"));
    let empty = emit_plots(&[], dir.path()).unwrap_err();
    assert!(matches!(empty, Error::Core(apanet_core::Error::Contract(_))));
}

#[test]
fn partition_overlay_histogram_matches_regions() {
    let dir = tempfile::tempdir().unwrap();
    let fg = Mask::from_fn(6, 6, |i, j| (1..3).contains(&i) && (1..5).contains(&j));
    let regions = remove_foreground(&spp_partition(6, 6, 2).unwrap(), &fg).unwrap();
    let regions = apanet_core::prototypes::PartitionMasks { masks: regions.masks[..3].to_vec(), ..regions };
    let scale = 3;
    let path = dir.path().join("overlay.png");
    partition_overlay(&regions, scale).unwrap().write_png(&path).unwrap();
    let img = RgbImage::read_png(&path).unwrap();
    assert_eq!((img.height, img.width), (18, 18));
    for (r, m) in regions.masks.iter().enumerate() {
        let n = img.data.chunks(3).filter(|px| *px == REGION_COLORS[r]).count();
        assert_eq!(n, m.count() * scale * scale, "region {r}");
    }
    let covered: usize = regions.masks.iter().map(Mask::count).sum();
    let black = img.data.chunks(3).filter(|px| *px == [0, 0, 0]).count();
    assert_eq!(black, (36 - covered) * scale * scale);
}

#[test]
fn zero_clusters_reproduce_the_lambda_zero_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut no_regions = small(dir.path());
    no_regions.method.clusters = 0;
    let mut no_weight = small(dir.path());
    no_weight.method.lambda = 0.0;
    let a = train_in_memory(&no_regions).unwrap();
    let b = train_in_memory(&no_weight).unwrap();
    assert_eq!(a.state.model, b.state.model);
}

#[test]
fn skipping_the_agnostic_branch_is_not_slower() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.training.steps = 30;
    let time = |lambda: f64| {
        let mut c = cfg.clone();
        c.method.lambda = lambda;
        let mut s = Session::new(&c).unwrap();
        let mut total = 0.0;
        s.train_to(&c, |log, _| total += log.wall_ms).unwrap();
        total
    };
    let (plain, full) = (time(0.0), time(0.5));
    assert!(plain <= full, "lambda=0 took {plain:.1} ms, lambda=0.5 took {full:.1} ms");
}

#[test]
fn untrained_models_score_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.eval.episodes = 40;
    let split = cfg.split().unwrap();
    let ep_cfg = cfg.episodes(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    rng.set_stream(2 + cfg.dataset.fold as u64);
    let mut all_fg = ConfusionCounts::new();
    for _ in 0..cfg.eval.episodes {
        let ep = sample_episode(&split, Phase::Test, &ep_cfg, &mut rng).unwrap();
        let (h, w) = ep.query.mask.dims();
        all_fg.accumulate(&Mask::ones(h, w), &ep.query.mask, ep.class_id).unwrap();
    }
    let chance = all_fg.miou(&split.novel_ids).unwrap();
    for seed in 0..3 {
        let model = Model::init(cfg.backbone(), cfg.model.head_width, seed).unwrap();
        let eval = evaluate(&model, &cfg, 1).unwrap();
        let covered = eval.counts.per_class.keys().filter(|c| split.is_novel(**c)).count();
        assert_eq!(covered, split.novel_ids.len());
        let score = eval.miou(&split.novel_ids).unwrap();
        assert!(score <= chance + 0.05, "seed {seed}: {score:.3} vs all-foreground {chance:.3}");
    }
}
