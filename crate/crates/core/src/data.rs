//! Synthetic episodic segmentation benchmark.
//!
//! Classes are combinations of a silhouette, a texture family, and a hue.
//! Training scenes can carry unannotated objects of held-out classes in their
//! background, controlled by the `bias_rate` knob on [`EpisodeConfig`].

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::tensor::{Mask, Tensor3};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassSplit {
    pub num_classes: usize,
    pub num_folds: usize,
    pub fold: usize,
    pub base_ids: Vec<usize>,
    pub novel_ids: Vec<usize>,
}

impl ClassSplit {
    /// Fold `fold` holds out the contiguous block
    /// `[fold * C/F, (fold + 1) * C/F)` as novel classes.
    pub fn new(num_classes: usize, fold: usize, num_folds: usize) -> Result<Self> {
        if num_classes == 0 || num_folds == 0 {
            bail!(Config, "num_classes and num_folds must be positive");
        }
        if num_classes % num_folds != 0 {
            bail!(Config, "num_folds {num_folds} does not divide num_classes {num_classes}");
        }
        if fold >= num_folds {
            bail!(Config, "fold {fold} out of range for {num_folds} folds");
        }
        let per_fold = num_classes / num_folds;
        let novel = fold * per_fold..(fold + 1) * per_fold;
        let (novel_ids, base_ids) = (0..num_classes).partition(|c| novel.contains(c));
        Ok(Self { num_classes, num_folds, fold, base_ids, novel_ids })
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.novel_ids.binary_search(&class_id).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TextureKind {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
}

const SHAPES: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Diamond];
const TEXTURES: [TextureKind; 4] = [
    TextureKind::Solid,
    TextureKind::HorizontalStripes,
    TextureKind::VerticalStripes,
    TextureKind::Checker,
];

/// Nominal look of a class before per-instance jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAppearance {
    pub shape: ShapeKind,
    pub texture: TextureKind,
    pub color: [f64; 3],
}

pub fn class_appearance(class_id: usize) -> ClassAppearance {
    let hue = (class_id as f64 * 0.618_033_988_749_895 + 0.07) % 1.0;
    ClassAppearance {
        shape: SHAPES[class_id % SHAPES.len()],
        texture: TEXTURES[(class_id / SHAPES.len()) % TEXTURES.len()],
        color: hsv_to_rgb(hue, 0.85, 0.9),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = libm::floor(h6) as i64 % 6;
    let f = h6 - libm::floor(h6);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectSpec {
    pub class_id: usize,
    pub shape: ShapeKind,
    pub texture: TextureKind,
    /// Centre in pixel coordinates `(row, col)`.
    pub center: (f64, f64),
    pub radius: f64,
    pub color: [f64; 3],
    /// Stripe / checker cell size in pixels.
    pub period: usize,
    /// Brightness drop of the dark texture cells, in `[0, 1)`.
    pub contrast: f64,
}

impl ObjectSpec {
    fn covers(&self, row: f64, col: f64) -> bool {
        let dy = row - self.center.0;
        let dx = col - self.center.1;
        let r = self.radius;
        match self.shape {
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.6 * (dy + r),
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.1 * r,
        }
    }

    fn shade(&self, i: usize, j: usize) -> [f64; 3] {
        let p = self.period.max(1);
        let dark = match self.texture {
            TextureKind::Solid => false,
            TextureKind::HorizontalStripes => (i / p) % 2 == 1,
            TextureKind::VerticalStripes => (j / p) % 2 == 1,
            TextureKind::Checker => (i / p + j / p) % 2 == 1,
        };
        let k = if dark { 1.0 - self.contrast } else { 1.0 };
        [self.color[0] * k, self.color[1] * k, self.color[2] * k]
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackgroundSpec {
    pub top: [f64; 3],
    pub bottom: [f64; 3],
    /// Amplitude of per-pixel uniform noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Drawn in order; later objects occlude earlier ones.
    pub objects: Vec<ObjectSpec>,
    pub background: BackgroundSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor3,
    /// One mask per class present in the scene; masks are pairwise disjoint.
    pub masks: BTreeMap<usize, Mask>,
}

/// Rasterises a scene. Pure in `spec`: the noise stream is seeded from `spec.seed`.
///
/// An object that ends up owning no pixel (off-canvas or fully occluded)
/// yields [`Error::Degenerate`] so samplers can retry with a fresh spec.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        bail!(Config, "empty canvas");
    }
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = &spec.background;
    let mut image = Tensor3::from_fn(h, w, 3, |i, _, d| {
        let t = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
        bg.top[d] * (1.0 - t) + bg.bottom[d] * t
    });
    let mut owner: Vec<Option<usize>> = alloc::vec![None; h * w];
    for (k, obj) in spec.objects.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                if obj.covers(i as f64 + 0.5, j as f64 + 0.5) {
                    owner[i * w + j] = Some(k);
                }
            }
        }
    }
    let mut owned = alloc::vec![0usize; spec.objects.len()];
    let mut masks: BTreeMap<usize, Mask> = BTreeMap::new();
    for i in 0..h {
        for j in 0..w {
            let px = image.cell_mut(i, j);
            if let Some(k) = owner[i * w + j] {
                let obj = &spec.objects[k];
                px.copy_from_slice(&obj.shade(i, j));
                owned[k] += 1;
                masks.entry(obj.class_id).or_insert_with(|| Mask::zeros(h, w)).set(i, j, true);
            }
            for v in px.iter_mut() {
                let n = if bg.noise > 0.0 { noise.gen_range(-bg.noise..=bg.noise) } else { 0.0 };
                *v = (*v + n).clamp(0.0, 1.0);
            }
        }
    }
    if let Some(k) = owned.iter().position(|&n| n == 0) {
        bail!(Degenerate, "object {k} (class {}) owns no pixels", spec.objects[k].class_id);
    }
    Ok(Scene { image, masks })
}

/// Nearest-neighbour resampling: output cell `(i, j)` reads input pixel
/// `(floor(i * H / h), floor(j * W / w))`.
pub fn downsample_mask(mask: &Mask, h: usize, w: usize) -> Result<Mask> {
    let (src_h, src_w) = mask.dims();
    if h == 0 || w == 0 || h > src_h || w > src_w {
        bail!(Config, "cannot downsample {src_h}x{src_w} to {h}x{w}");
    }
    let out = Mask::from_fn(h, w, |i, j| mask.get(i * src_h / h, j * src_w / w));
    if out.is_empty() {
        bail!(Degenerate, "mask vanished at {h}x{w}");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeConfig {
    pub height: usize,
    pub width: usize,
    /// Ratio between image and feature resolution; every mask must survive
    /// downsampling by this factor.
    pub feature_stride: usize,
    pub k_shot: usize,
    /// Probability that a training scene carries an unannotated novel object.
    pub bias_rate: f64,
    /// Probability of one extra object of another class in any scene.
    pub distractor_rate: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { height: 32, width: 32, feature_stride: 4, k_shot: 1, bias_rate: 0.0, distractor_rate: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor3,
    pub mask: Mask,
    /// Every class rendered into the scene, annotated or not.
    pub present: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_id: usize,
    pub support: Vec<LabeledImage>,
    pub query: LabeledImage,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }
}

const MAX_SCENE_ATTEMPTS: usize = 64;

/// Draws one episode for `phase` from the class pools of `split`.
pub fn sample_episode<R: Rng + ?Sized>(
    split: &ClassSplit,
    phase: Phase,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    if cfg.k_shot == 0 {
        bail!(Config, "k_shot must be at least 1");
    }
    if !(0.0..=1.0).contains(&cfg.bias_rate) || !(0.0..=1.0).contains(&cfg.distractor_rate) {
        bail!(Config, "rates must lie in [0, 1]");
    }
    let stride = cfg.feature_stride.max(1);
    if cfg.height % stride != 0 || cfg.width % stride != 0 {
        bail!(Config, "image {}x{} not divisible by stride {stride}", cfg.height, cfg.width);
    }
    let pool = match phase {
        Phase::Train => &split.base_ids,
        Phase::Test => &split.novel_ids,
    };
    let Some(&class_id) = pool.choose(rng) else {
        bail!(Config, "empty class pool for {phase:?}");
    };
    let mut draw = || sample_scene(split, phase, class_id, cfg, rng);
    let support = (0..cfg.k_shot).map(|_| draw()).collect::<Result<Vec<_>>>()?;
    let query = draw()?;
    Ok(Episode { class_id, support, query })
}

fn sample_scene<R: Rng + ?Sized>(
    split: &ClassSplit,
    phase: Phase,
    class_id: usize,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<LabeledImage> {
    let (fh, fw) = (cfg.height / cfg.feature_stride, cfg.width / cfg.feature_stride);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let spec = random_scene_spec(split, phase, class_id, cfg, rng);
        let scene = match render_scene(&spec) {
            Ok(s) => s,
            Err(e) if e.is_degenerate() => continue,
            Err(e) => return Err(e),
        };
        let Some(mask) = scene.masks.get(&class_id) else { continue };
        match downsample_mask(mask, fh, fw) {
            Ok(small) if !small.is_full() => {}
            Ok(_) => continue,
            Err(e) if e.is_degenerate() => continue,
            Err(e) => return Err(e),
        }
        let present = scene.masks.keys().copied().collect();
        return Ok(LabeledImage { mask: mask.clone(), image: scene.image, present });
    }
    Err(Error::SamplingExhausted(MAX_SCENE_ATTEMPTS))
}

fn random_object<R: Rng + ?Sized>(class_id: usize, h: usize, w: usize, rng: &mut R) -> ObjectSpec {
    let look = class_appearance(class_id);
    let size = h.min(w) as f64;
    let radius = size * rng.gen_range(0.2..0.32);
    let jitter = rng.gen_range(0.85..1.1);
    ObjectSpec {
        class_id,
        shape: look.shape,
        texture: look.texture,
        center: (rng.gen_range(0.2..0.8) * h as f64, rng.gen_range(0.2..0.8) * w as f64),
        radius,
        color: look.color.map(|c| (c * jitter).clamp(0.0, 1.0)),
        period: 2,
        contrast: rng.gen_range(0.45..0.6),
    }
}

fn random_scene_spec<R: Rng + ?Sized>(
    split: &ClassSplit,
    phase: Phase,
    class_id: usize,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> SceneSpec {
    let (h, w) = (cfg.height, cfg.width);
    let mut objects = alloc::vec![random_object(class_id, h, w, rng)];
    if rng.gen_bool(cfg.distractor_rate) {
        let others: Vec<usize> = split.base_ids.iter().copied().filter(|&c| c != class_id).collect();
        if let Some(&c) = others.choose(rng) {
            objects.push(random_object(c, h, w, rng));
        }
    }
    if phase == Phase::Train && cfg.bias_rate > 0.0 && rng.gen_bool(cfg.bias_rate) {
        if let Some(&c) = split.novel_ids.choose(rng) {
            objects.push(random_object(c, h, w, rng));
        }
    }
    objects.shuffle(rng);
    let grey: f64 = rng.gen_range(0.25..0.6);
    let tint = |rng: &mut R| [0, 1, 2].map(|_| (grey + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
    let background = BackgroundSpec { top: tint(rng), bottom: tint(rng), noise: 0.04 };
    SceneSpec { height: h, width: w, objects, background, seed: rng.gen() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(class_id: usize, center: (f64, f64), radius: f64) -> ObjectSpec {
        let look = class_appearance(class_id);
        ObjectSpec {
            class_id,
            shape: ShapeKind::Disc,
            texture: look.texture,
            center,
            radius,
            color: look.color,
            period: 2,
            contrast: 0.5,
        }
    }

    fn scene(objects: Vec<ObjectSpec>) -> SceneSpec {
        SceneSpec {
            height: 16,
            width: 16,
            objects,
            background: BackgroundSpec { top: [0.3; 3], bottom: [0.5; 3], noise: 0.02 },
            seed: 11,
        }
    }

    #[test]
    fn split_examples() {
        let s = ClassSplit::new(20, 0, 4).unwrap();
        assert_eq!(s.novel_ids, (0..5).collect::<Vec<_>>());
        assert_eq!(s.base_ids, (5..20).collect::<Vec<_>>());
        let s = ClassSplit::new(8, 3, 4).unwrap();
        assert_eq!(s.novel_ids, [6, 7]);
        assert_eq!(s.base_ids, (0..6).collect::<Vec<_>>());
        assert!(matches!(ClassSplit::new(20, 4, 4), Err(Error::Config(_))));
        assert!(matches!(ClassSplit::new(10, 0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn single_object_scene() {
        let s = render_scene(&scene(alloc::vec![obj(3, (8.0, 8.0), 4.0)])).unwrap();
        assert_eq!(s.masks.keys().copied().collect::<Vec<_>>(), [3]);
        let m = &s.masks[&3];
        assert!(m.get(8, 8) && !m.get(0, 0));
        assert!(s.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn later_object_owns_overlap() {
        let spec = scene(alloc::vec![obj(1, (8.0, 6.0), 4.0), obj(2, (8.0, 10.0), 4.0)]);
        let s = render_scene(&spec).unwrap();
        let (a, b) = (&s.masks[&1], &s.masks[&2]);
        assert!(!a.intersects(b));
        // Back-to-front oracle: the last object covering a pixel owns it.
        for i in 0..16 {
            for j in 0..16 {
                let (r, c) = (i as f64 + 0.5, j as f64 + 0.5);
                let expect = spec.objects.iter().rev().find(|o| o.covers(r, c)).map(|o| o.class_id);
                let got = [1, 2].into_iter().find(|k| s.masks[k].get(i, j));
                assert_eq!(expect, got);
            }
        }
    }

    #[test]
    fn fully_occluded_object_is_degenerate() {
        let spec = scene(alloc::vec![obj(1, (8.0, 8.0), 2.0), obj(2, (8.0, 8.0), 6.0)]);
        assert!(matches!(render_scene(&spec), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rendering_is_pure() {
        let spec = scene(alloc::vec![obj(5, (7.0, 9.0), 5.0)]);
        assert_eq!(render_scene(&spec).unwrap(), render_scene(&spec).unwrap());
    }

    #[test]
    fn downsample_examples() {
        let full = Mask::ones(32, 32);
        assert!(downsample_mask(&full, 8, 8).unwrap().is_full());
        let left = Mask::from_fn(32, 32, |_, j| j < 16);
        assert_eq!(downsample_mask(&left, 8, 8).unwrap(), Mask::from_fn(8, 8, |_, j| j < 4));
        let mut dot = Mask::zeros(32, 32);
        dot.set(0, 0, true);
        let small = downsample_mask(&dot, 8, 8).unwrap();
        assert_eq!(small.indices().collect::<Vec<_>>(), [0]);
        let mut off = Mask::zeros(32, 32);
        off.set(1, 1, true);
        assert!(matches!(downsample_mask(&off, 8, 8), Err(Error::Degenerate(_))));
    }

    #[test]
    fn episode_routing_and_reproducibility() {
        let split = ClassSplit::new(8, 0, 4).unwrap();
        let cfg = EpisodeConfig { k_shot: 5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&split, Phase::Test, &cfg, &mut rng).unwrap();
        assert_eq!(ep.k(), 5);
        assert!(split.is_novel(ep.class_id));
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            sample_episode(&split, Phase::Train, &cfg, &mut a).unwrap(),
            sample_episode(&split, Phase::Train, &cfg, &mut b).unwrap()
        );
    }
}
