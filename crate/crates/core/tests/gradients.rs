//! Analytic gradients against central finite differences.

use apanet_core::backbone::BackboneConfig;
use apanet_core::data::{sample_episode, ClassSplit, Episode, EpisodeConfig, Phase};
use apanet_core::head::{episode_gradients, MethodConfig, Model, PartitionStrategy, PrototypeSource};
use apanet_core::prototypes::{masked_average_pool, masked_average_pool_backward, PrototypeKind};
use apanet_core::{ChaCha8Rng, Mask, Params, Tensor3};
use rand::{Rng, SeedableRng};

const STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn setup(seed: u64, k: usize) -> (Model, Episode) {
    let cfg = BackboneConfig { height: 16, width: 16, widths: [4, 5, 5, 6], stride: 4 };
    let model = Model::init(cfg, 6, seed).unwrap();
    let split = ClassSplit::new(8, 0, 4).unwrap();
    let ep_cfg = EpisodeConfig { height: 16, width: 16, feature_stride: 4, k_shot: k, bias_rate: 0.5, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = sample_episode(&split, Phase::Train, &ep_cfg, &mut rng).unwrap();
    (model, ep)
}

fn check(model: &Model, ep: &Episode, method: &MethodConfig, seed: u64, indices: &[usize]) {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let analytic = episode_gradients(model, ep, method, &mut rng.clone()).unwrap();
    let flat = analytic.grads.flatten();
    for &idx in indices {
        let mut plus = model.clone();
        plus.set_param(idx, model.get_param(idx) + STEP);
        let mut minus = model.clone();
        minus.set_param(idx, model.get_param(idx) - STEP);
        let lp = episode_gradients(&plus, ep, method, &mut rng.clone()).unwrap().loss;
        let lm = episode_gradients(&minus, ep, method, &mut rng.clone()).unwrap().loss;
        let fd = (lp - lm) / (2.0 * STEP);
        assert!(rel_err(flat[idx], fd) <= 1e-4, "param {idx}: analytic {} vs fd {fd}", flat[idx]);
    }
}

#[test]
fn full_loss_gradients_for_every_method_variant() {
    let variants = [
        MethodConfig::default(),
        MethodConfig { lambda: 0.0, ..Default::default() },
        MethodConfig { lambda: 1.0, ..Default::default() },
        MethodConfig { partition: PartitionStrategy::Spp { level: 2 }, ..Default::default() },
        MethodConfig { source: PrototypeSource::Support, clusters: 2, ..Default::default() },
    ];
    for (v, method) in variants.iter().enumerate() {
        let (model, ep) = setup(v as u64 + 20, 1 + v % 2);
        let n = model.param_count();
        let mut pick = ChaCha8Rng::seed_from_u64(v as u64);
        let head_start = model.backbone.param_count();
        let mut idx: Vec<usize> = (head_start..n).step_by(7).collect();
        idx.extend((0..40).map(|_| pick.gen_range(0..head_start)));
        check(&model, &ep, method, 99, &idx);
    }
}

#[test]
fn high_level_features_receive_no_gradient() {
    let (model, ep) = setup(3, 1);
    let g = episode_gradients(&model, &ep, &MethodConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(g.grads.backbone.stages[3].weight.iter().all(|&v| v == 0.0));
    assert!(g.grads.backbone.stages[0].weight.iter().any(|&v| v != 0.0));
}

#[test]
fn pooling_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Tensor3::from_fn(4, 3, 2, |_, _, _| rng.gen_range(-1.0..1.0));
    let m = Mask::from_fn(4, 3, |i, j| (i + j) % 3 != 0);
    let w = [0.7, -1.3];
    let obj = |f: &Tensor3| {
        let p = masked_average_pool(f, &m, PrototypeKind::ClassSpecific).unwrap();
        p.vector.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut d = Tensor3::zeros(4, 3, 2);
    masked_average_pool_backward(&w, &m, &mut d);
    for k in 0..f.as_slice().len() {
        let mut fp = f.clone();
        fp.as_mut_slice()[k] += STEP;
        let mut fm = f.clone();
        fm.as_mut_slice()[k] -= STEP;
        let fd = (obj(&fp) - obj(&fm)) / (2.0 * STEP);
        let a = d.as_slice()[k];
        assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3), "{k}: {a} vs {fd}");
    }
}
