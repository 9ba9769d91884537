//! Shared comparison head, the two-branch loss, training, and inference.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{assign_class_agnostic, expand_class_specific, fused_backward, FusedTensor};
use crate::backbone::{Backbone, BackboneConfig, BackboneTrace};
use crate::data::{downsample_mask, Episode, LabeledImage};
use crate::error::{bail, Error, Result};
use crate::nn::{self, Conv, Params};
use crate::prototypes::{
    class_agnostic_prototypes, kmeans_partition, masked_average_pool, masked_average_pool_backward,
    nearest_prototype_partition, remove_foreground, spp_partition, PartitionMasks, Prototype, PrototypeKind,
};
use crate::tensor::{Mask, Tensor3};

/// 3×3 convolution to `width` channels, tanh, then a 1×1 convolution to the
/// two logits (background, foreground). One instance serves both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Conv,
    pub out: Conv,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(feature_channels: usize, width: usize, rng: &mut R) -> Self {
        Self { hidden: Conv::init(3, 2 * feature_channels, width, rng), out: Conv::init(1, width, 2, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { hidden: self.hidden.zeros_like(), out: self.out.zeros_like() }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.hidden.macs(h, w) + self.out.macs(h, w)
    }
}

impl Params for HeadParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.hidden.tensors().into_iter().chain(self.out.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.hidden.tensors_mut().into_iter().chain(self.out.tensors_mut()).collect()
    }
}

/// Per-cell two-way logits for a fused tensor.
pub fn compare(fused: &FusedTensor, head: &HeadParams) -> Result<Tensor3> {
    Ok(compare_traced(&fused.x, head)?.0)
}

fn compare_traced(x: &Tensor3, head: &HeadParams) -> Result<(Tensor3, Tensor3)> {
    if x.channels() != head.hidden.c_in {
        bail!(Shape, "head expects {} channels, got {}", head.hidden.c_in, x.channels());
    }
    let hidden = nn::tanh(&head.hidden.forward(x)?);
    let logits = head.out.forward(&hidden)?;
    Ok((logits, hidden))
}

fn compare_backward(x: &Tensor3, hidden: &Tensor3, head: &HeadParams, d_logits: &Tensor3, grad: &mut HeadParams) -> Tensor3 {
    let d_hidden = head.out.backward(hidden, d_logits, &mut grad.out, true).expect("dx");
    let d_pre = nn::tanh_backward(hidden, &d_hidden);
    head.hidden.backward(x, &d_pre, &mut grad.hidden, true).expect("dx")
}

/// `(1 - λ) · CE(sq, M) + λ · CE(qq, 1 - M)`, each term averaged over cells.
/// A branch with zero weight is not evaluated.
pub fn loss(logits_sq: &Tensor3, logits_qq: Option<&Tensor3>, mask: &Mask, lambda: f64) -> Result<f64> {
    Ok(weighted_loss(logits_sq, logits_qq, mask, lambda)?.total)
}

#[derive(Debug, Clone)]
struct BranchLoss {
    total: f64,
    sq: Option<(f64, Tensor3)>,
    qq: Option<(f64, Tensor3)>,
}

fn weighted_loss(logits_sq: &Tensor3, logits_qq: Option<&Tensor3>, mask: &Mask, lambda: f64) -> Result<BranchLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Config, "lambda {lambda} outside [0, 1]");
    }
    let sq = (lambda < 1.0).then(|| nn::cross_entropy(logits_sq, mask.as_slice())).transpose()?;
    let qq = if lambda > 0.0 {
        let Some(logits_qq) = logits_qq else {
            bail!(Contract, "lambda > 0 requires class-agnostic logits");
        };
        Some(nn::cross_entropy(logits_qq, mask.not().as_slice())?)
    } else {
        None
    };
    let total = match (&sq, &qq) {
        (Some((a, _)), None) => *a,
        (None, Some((b, _))) => *b,
        (Some((a, _)), Some((b, _))) => (1.0 - lambda) * a + lambda * b,
        (None, None) => unreachable!("lambda is in [0, 1]"),
    };
    if !total.is_finite() {
        bail!(NonFinite, "loss");
    }
    Ok(BranchLoss { total, sq, qq })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum PartitionStrategy {
    KMeans,
    Spp { level: usize },
}

/// Where class-agnostic prototypes are pooled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PrototypeSource {
    Query,
    /// Background of the first support image, paired with the query by
    /// nearest-prototype assignment.
    Support,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MethodConfig {
    pub lambda: f64,
    pub clusters: usize,
    pub kmeans_iters: usize,
    pub partition: PartitionStrategy,
    pub source: PrototypeSource,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            clusters: 3,
            kmeans_iters: 10,
            partition: PartitionStrategy::KMeans,
            source: PrototypeSource::Query,
        }
    }
}

impl MethodConfig {
    /// The class-agnostic branch runs only with a positive weight and at
    /// least one region to pool; `clusters = 0` is the baseline.
    pub fn class_agnostic_enabled(&self) -> bool {
        self.lambda > 0.0
            && match self.partition {
                PartitionStrategy::KMeans => self.clusters > 0,
                PartitionStrategy::Spp { .. } => true,
            }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.class_agnostic_enabled() {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.0025, momentum: 0.9 }
    }
}

/// Backbone plus comparison head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: HeadParams,
}

impl Model {
    pub fn init(config: BackboneConfig, head_width: usize, seed: u64) -> Result<Self> {
        if head_width == 0 {
            bail!(Config, "head width must be positive");
        }
        let backbone = Backbone::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let head = HeadParams::init(backbone.config.mid_channels(), head_width, &mut rng);
        Ok(Self { backbone, head })
    }

    pub fn zeros_like(&self) -> Self {
        Self { backbone: self.backbone.zeros_like(), head: self.head.zeros_like() }
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.backbone.config.feature_size()
    }
}

impl Params for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.backbone.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.backbone.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// Loss terms and parameter gradients for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeGradients {
    pub loss: f64,
    pub loss_sq: Option<f64>,
    pub loss_qq: Option<f64>,
    /// Number of class-agnostic prototypes used, 0 when the branch is off.
    pub regions: usize,
    pub grads: Model,
}

struct SupportPass {
    trace: BackboneTrace,
    mask: Mask,
    proto: Prototype,
}

/// Forward and backward pass through both branches for one episode.
///
/// `rng` drives clustering seeds and the foreground prototype draw; it is not
/// consumed when the class-agnostic branch is disabled.
pub fn episode_gradients<R: Rng + ?Sized>(
    model: &Model,
    episode: &Episode,
    method: &MethodConfig,
    rng: &mut R,
) -> Result<EpisodeGradients> {
    if episode.support.is_empty() {
        bail!(Contract, "episode has no support images");
    }
    let (fh, fw) = model.feature_size();
    let support = episode
        .support
        .iter()
        .map(|shot| support_pass(model, shot, fh, fw))
        .collect::<Result<Vec<_>>>()?;
    let fg_proto = mean_prototype(support.iter().map(|s| &s.proto))?;
    let query = model.backbone.forward(&episode.query.image)?;
    let query_mask = downsample_mask(&episode.query.mask, fh, fw)?;

    let fused_sq = expand_class_specific(&fg_proto, &query.mid)?;
    let (logits_sq, hidden_sq) = compare_traced(&fused_sq.x, &model.head)?;

    let lambda = method.effective_lambda();
    let agnostic = if lambda > 0.0 {
        Some(class_agnostic_branch(model, &support[0], &query, &query_mask, method, rng)?)
    } else {
        None
    };
    let parts = weighted_loss(&logits_sq, agnostic.as_ref().map(|a| &a.logits), &query_mask, lambda)?;

    let mut grads = model.zeros_like();
    let mut d_query = Tensor3::zeros(fh, fw, query.mid.channels());
    let mut d_support: Vec<Tensor3> = support.iter().map(|_| Tensor3::zeros(fh, fw, query.mid.channels())).collect();

    if let Some((_, d_logits)) = &parts.sq {
        let d_logits = scaled(d_logits, 1.0 - lambda);
        let d_x = compare_backward(&fused_sq.x, &hidden_sq, &model.head, &d_logits, &mut grads.head);
        let d_proto = fused_backward(&fused_sq, &d_x, 1, &mut d_query).remove(0);
        let share = 1.0 / support.len() as f64;
        let d_each: Vec<f64> = d_proto.iter().map(|g| g * share).collect();
        for (s, d) in support.iter().zip(d_support.iter_mut()) {
            masked_average_pool_backward(&d_each, &s.mask, d);
        }
    }
    if let (Some(branch), Some((_, d_logits))) = (&agnostic, &parts.qq) {
        let d_logits = scaled(d_logits, lambda);
        let d_x = compare_backward(&branch.fused.x, &branch.hidden, &model.head, &d_logits, &mut grads.head);
        let d_protos = fused_backward(&branch.fused, &d_x, branch.pooled.len(), &mut d_query);
        let target = match method.source {
            PrototypeSource::Query => &mut d_query,
            PrototypeSource::Support => &mut d_support[0],
        };
        for (d, region) in d_protos.iter().zip(&branch.pooled) {
            masked_average_pool_backward(d, region, target);
        }
    }
    for (s, d) in support.iter().zip(&d_support) {
        model.backbone.backward(&s.trace, d, &mut grads.backbone)?;
    }
    model.backbone.backward(&query, &d_query, &mut grads.backbone)?;

    Ok(EpisodeGradients {
        loss: parts.total,
        loss_sq: parts.sq.map(|(l, _)| l),
        loss_qq: parts.qq.map(|(l, _)| l),
        regions: agnostic.as_ref().map_or(0, |a| a.pooled.len()),
        grads,
    })
}

fn scaled(t: &Tensor3, k: f64) -> Tensor3 {
    let (h, w, c) = t.dims();
    Tensor3::from_vec(h, w, c, t.as_slice().iter().map(|v| v * k).collect()).expect("same shape")
}

fn support_pass(model: &Model, shot: &LabeledImage, fh: usize, fw: usize) -> Result<SupportPass> {
    let trace = model.backbone.forward(&shot.image)?;
    let mask = downsample_mask(&shot.mask, fh, fw)?;
    let proto = masked_average_pool(&trace.mid, &mask, PrototypeKind::ClassSpecific)?;
    Ok(SupportPass { trace, mask, proto })
}

fn mean_prototype<'a>(protos: impl Iterator<Item = &'a Prototype>) -> Result<Prototype> {
    let mut n = 0usize;
    let mut area = 0usize;
    let mut acc: Vec<f64> = Vec::new();
    for p in protos {
        if acc.is_empty() {
            acc = vec![0.0; p.vector.len()];
        }
        acc.iter_mut().zip(&p.vector).for_each(|(a, v)| *a += v);
        area += p.area;
        n += 1;
    }
    if n == 0 {
        bail!(Contract, "no support prototypes to average");
    }
    if n > 1 {
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Prototype { vector: acc, kind: PrototypeKind::ClassSpecific, area })
}

struct AgnosticBranch {
    fused: FusedTensor,
    hidden: Tensor3,
    logits: Tensor3,
    /// Pooling mask of each prototype, on the grid it was pooled from.
    pooled: Vec<Mask>,
}

fn partition_for<R: Rng + ?Sized>(high: &Tensor3, method: &MethodConfig, rng: &mut R) -> Result<PartitionMasks> {
    match method.partition {
        PartitionStrategy::KMeans => kmeans_partition(high, method.clusters, method.kmeans_iters, rng),
        PartitionStrategy::Spp { level } => spp_partition(high.height(), high.width(), level),
    }
}

fn class_agnostic_branch<R: Rng + ?Sized>(
    model: &Model,
    support: &SupportPass,
    query: &BackboneTrace,
    query_mask: &Mask,
    method: &MethodConfig,
    rng: &mut R,
) -> Result<AgnosticBranch> {
    let (pooled, protos, regions) = match method.source {
        PrototypeSource::Query => {
            let partition = partition_for(&query.high, method, rng)?;
            let background = remove_foreground(&partition, query_mask)?;
            let protos = class_agnostic_prototypes(&query.mid, &background)?;
            (background.masks.clone(), protos, background)
        }
        PrototypeSource::Support => {
            let partition = partition_for(&support.trace.high, method, rng)?;
            let background = remove_foreground(&partition, &support.mask)?;
            let protos = class_agnostic_prototypes(&support.trace.mid, &background)?;
            let transfer = nearest_prototype_partition(&query.mid, &protos)?;
            // Keep only prototypes that claim some query background cell.
            let mut pooled = Vec::new();
            let mut kept = Vec::new();
            let mut masks = Vec::new();
            for ((m, p), src) in transfer.masks.iter().zip(protos).zip(background.masks) {
                let bg = m.minus(query_mask);
                if !bg.is_empty() {
                    masks.push(bg);
                    kept.push(p);
                    pooled.push(src);
                }
            }
            if masks.is_empty() {
                return Err(Error::Degenerate("query has no background".into()));
            }
            (pooled, kept, PartitionMasks { masks, origin: transfer.origin })
        }
    };
    let fused = assign_class_agnostic(&protos, &regions, query_mask, &query.mid, rng)?;
    let (logits, hidden) = compare_traced(&fused.x, &model.head)?;
    Ok(AgnosticBranch { fused, hidden, logits, pooled })
}

/// Optimiser and bookkeeping owned by one training driver.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Model,
    pub step: u64,
    pub skipped: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let velocity = model.zeros_like();
        Self { model, velocity, step: 0, skipped: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean loss over the episodes that contributed, `None` if all were skipped.
    pub loss: Option<f64>,
    pub skipped: usize,
}

/// One optimiser step on a single episode.
pub fn train_episode(state: &mut TrainState, episode: &Episode, method: &MethodConfig, optim: &OptimConfig) -> Result<StepReport> {
    train_batch(state, core::slice::from_ref(episode), method, optim)
}

/// One optimiser step on the mean gradient of `episodes`. Episodes that turn
/// out degenerate are skipped and counted.
pub fn train_batch(
    state: &mut TrainState,
    episodes: &[Episode],
    method: &MethodConfig,
    optim: &OptimConfig,
) -> Result<StepReport> {
    let mut total: Option<Model> = None;
    let mut loss_sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for ep in episodes {
        match episode_gradients(&state.model, ep, method, &mut state.rng) {
            Ok(g) => {
                loss_sum += g.loss;
                used += 1;
                match total.as_mut() {
                    None => total = Some(g.grads),
                    Some(acc) => {
                        for (a, b) in acc.tensors_mut().into_iter().zip(g.grads.tensors()) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Err(e) if e.is_degenerate() => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    state.skipped += skipped as u64;
    let Some(mut grads) = total else {
        return Ok(StepReport { loss: None, skipped });
    };
    if used > 1 {
        let inv = 1.0 / used as f64;
        grads.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|g| *g *= inv));
    }
    sgd_momentum(&mut state.model, &mut state.velocity, &grads, optim);
    state.step += 1;
    Ok(StepReport { loss: Some(loss_sum / used as f64), skipped })
}

/// `v ← μ·v + g`, `θ ← θ − lr·v`.
pub fn sgd_momentum(model: &mut Model, velocity: &mut Model, grads: &Model, optim: &OptimConfig) {
    for ((p, v), g) in model.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads.tensors()) {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = optim.momentum * *v + g;
            *p -= optim.lr * *v;
        }
    }
}

/// Work done by one call to [`infer_traced`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferenceCost {
    pub backbone_passes: usize,
    pub head_passes: usize,
    pub macs: u64,
    pub kmeans_runs: usize,
}

/// Predicts the query mask at image resolution from `k` support pairs.
pub fn infer(support: &[(Tensor3, Mask)], query: &Tensor3, model: &Model) -> Result<Mask> {
    Ok(infer_traced(support, query, model)?.0)
}

/// [`infer`] together with an account of the work performed. Only the
/// support-query branch runs: the averaged support prototype is compared
/// against the query and the per-cell argmax is upsampled by nearest
/// neighbour.
pub fn infer_traced(support: &[(Tensor3, Mask)], query: &Tensor3, model: &Model) -> Result<(Mask, InferenceCost)> {
    if support.is_empty() {
        bail!(Contract, "inference needs at least one support pair");
    }
    let (fh, fw) = model.feature_size();
    let mut cost = InferenceCost::default();
    let mut protos = Vec::with_capacity(support.len());
    for (image, mask) in support {
        let trace = model.backbone.forward(image)?;
        cost.backbone_passes += 1;
        let small = downsample_mask(mask, fh, fw)?;
        protos.push(masked_average_pool(&trace.mid, &small, PrototypeKind::ClassSpecific)?);
    }
    let proto = mean_prototype(protos.iter())?;
    let q = model.backbone.forward(query)?;
    cost.backbone_passes += 1;
    let logits = compare(&expand_class_specific(&proto, &q.mid)?, &model.head)?;
    cost.head_passes += 1;
    cost.macs = model.backbone.macs() * cost.backbone_passes as u64 + model.head.macs(fh, fw);
    let (h, w) = (query.height(), query.width());
    let stride = model.backbone.config.stride;
    let pred = Mask::from_fn(h, w, |i, j| {
        let z = logits.cell(i / stride, j / stride);
        z[1] > z[0]
    });
    Ok((pred, cost))
}

/// Averaged support prototype as used by [`infer`]; exposed for inspection.
pub fn support_prototype(support: &[(Tensor3, Mask)], model: &Model) -> Result<Prototype> {
    if support.is_empty() {
        bail!(Contract, "inference needs at least one support pair");
    }
    let (fh, fw) = model.feature_size();
    let protos = support
        .iter()
        .map(|(image, mask)| {
            let trace = model.backbone.forward(image)?;
            masked_average_pool(&trace.mid, &downsample_mask(mask, fh, fw)?, PrototypeKind::ClassSpecific)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_prototype(protos.iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::expand_class_specific;

    fn tiny_model(seed: u64) -> Model {
        let cfg = BackboneConfig { height: 8, width: 8, widths: [3, 4, 4, 4], stride: 2 };
        Model::init(cfg, 5, seed).unwrap()
    }

    #[test]
    fn zero_head_outputs_biases() {
        let mut head = HeadParams::init(2, 3, &mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
        head.out.bias = vec![0.3, -1.5];
        let proto = Prototype { vector: vec![1.0, 2.0], kind: PrototypeKind::ClassSpecific, area: 1 };
        let q = Tensor3::from_fn(3, 3, 2, |i, j, d| (i + j + d) as f64);
        let logits = compare(&expand_class_specific(&proto, &q).unwrap(), &head).unwrap();
        for idx in 0..9 {
            assert_eq!(logits.cell_flat(idx), [0.3, -1.5]);
        }
    }

    #[test]
    fn head_rejects_wrong_width() {
        let head = HeadParams::init(3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let proto = Prototype { vector: vec![1.0, 2.0], kind: PrototypeKind::ClassSpecific, area: 1 };
        let fused = expand_class_specific(&proto, &Tensor3::zeros(2, 2, 2)).unwrap();
        assert!(matches!(compare(&fused, &head), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_blends_branches() {
        // Logits (0, z) give CE = ln(1 + e^{-z}) on a foreground target.
        let ce = |z: f64| libm::log(1.0 + libm::exp(-z));
        let z_sq = -libm::log(libm::exp(2.0) - 1.0);
        let z_qq = -libm::log(libm::exp(4.0) - 1.0);
        let mask = Mask::ones(1, 1);
        let sq = Tensor3::from_vec(1, 1, 2, vec![0.0, z_sq]).unwrap();
        // The class-agnostic target is the complement, so put z on channel 0.
        let qq = Tensor3::from_vec(1, 1, 2, vec![z_qq, 0.0]).unwrap();
        assert!((ce(z_sq) - 2.0).abs() < 1e-12);
        let l = loss(&sq, Some(&qq), &mask, 0.5).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
        assert_eq!(loss(&sq, None, &mask, 0.0).unwrap(), nn::cross_entropy(&sq, mask.as_slice()).unwrap().0);
        assert_eq!(loss(&sq, Some(&qq), &mask, 1.0).unwrap(), nn::cross_entropy(&qq, &[false]).unwrap().0);
        assert!(matches!(loss(&sq, None, &mask, 0.3), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_averages_support_prototypes() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = |rng: &mut ChaCha8Rng| Tensor3::from_fn(8, 8, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let a = (img(&mut rng), Mask::from_fn(8, 8, |i, _| i < 4));
        let b = (img(&mut rng), Mask::from_fn(8, 8, |_, j| j >= 2));
        let pa = support_prototype(core::slice::from_ref(&a), &model).unwrap();
        let pb = support_prototype(core::slice::from_ref(&b), &model).unwrap();
        let both = support_prototype(&[a.clone(), b], &model).unwrap();
        for d in 0..pa.vector.len() {
            assert!((both.vector[d] - (pa.vector[d] + pb.vector[d]) / 2.0).abs() < 1e-15);
        }
        let q = img(&mut rng);
        let (pred, cost) = infer_traced(core::slice::from_ref(&a), &q, &model).unwrap();
        assert_eq!(pred.dims(), (8, 8));
        assert_eq!(cost.kmeans_runs, 0);
        assert_eq!(cost.backbone_passes, 2);
        assert!(matches!(infer(&[], &q, &model), Err(Error::Contract(_))));
    }
}
