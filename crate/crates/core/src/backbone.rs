//! Four-stage convolutional feature extractor.
//!
//! ```text
//! image ─ conv·tanh·pool(p1) ─ conv·tanh·pool(p2) ─┬──────────────────────────── mid  (h × w)
//!                                                  └ conv·tanh·pool(q) ─┬─ up(q) ─ mid
//!                                                                        └ conv·tanh ─ up(q) ─ high
//! F     = concat(stage 2, upsampled stage 3)
//! F_bar = upsampled stage 4, gradient-stopped
//! ```
//!
//! `p1 * p2` is the configured stride `s`; `q` is 2 when the feature grid is
//! even-sized and 1 otherwise.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::downsample_mask;
use crate::error::{bail, Result};
use crate::nn::{self, Conv, Params};
use crate::tensor::{Mask, Tensor3};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the four stages.
    pub widths: [usize; 4],
    /// Total downsampling factor between image and feature grid.
    pub stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { height: 32, width: 32, widths: [8, 12, 12, 16], stride: 4 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.height % self.stride != 0 || self.width % self.stride != 0 {
            bail!(Config, "image {}x{} is not divisible by stride {}", self.height, self.width, self.stride);
        }
        if self.widths.iter().any(|&c| c == 0) {
            bail!(Config, "stage widths must be positive");
        }
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    /// Channels of the comparison features `F`.
    pub fn mid_channels(&self) -> usize {
        self.widths[1] + self.widths[2]
    }

    pub fn high_channels(&self) -> usize {
        self.widths[3]
    }

    fn pools(&self) -> (usize, usize, usize) {
        let p2 = if self.stride % 2 == 0 { 2 } else { 1 };
        let (h, w) = self.feature_size();
        let q = if h % 2 == 0 && w % 2 == 0 { 2 } else { 1 };
        (self.stride / p2, p2, q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: [Conv; 4],
}

impl Backbone {
    /// Deterministic initialisation from `seed`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, c, d] = config.widths;
        let stages = [
            Conv::init(3, 3, a, &mut rng),
            Conv::init(3, a, b, &mut rng),
            Conv::init(3, b, c, &mut rng),
            Conv::init(3, c, d, &mut rng),
        ];
        Ok(Self { config, stages })
    }

    pub fn zeros_like(&self) -> Self {
        Self { config: self.config.clone(), stages: self.stages.clone().map(|s| s.zeros_like()) }
    }

    /// Forward pass keeping the activations needed by [`Backbone::backward`].
    pub fn forward(&self, image: &Tensor3) -> Result<BackboneTrace> {
        let cfg = &self.config;
        if image.dims() != (cfg.height, cfg.width, 3) {
            bail!(
                Shape,
                "expected a {}x{}x3 image, got {}x{}x{}",
                cfg.height,
                cfg.width,
                image.height(),
                image.width(),
                image.channels()
            );
        }
        let (p1, p2, q) = cfg.pools();
        let stage = |idx: usize, x: &Tensor3| -> Result<Tensor3> {
            let act = nn::tanh(&self.stages[idx].forward(x)?);
            if !act.is_finite() {
                bail!(NonFinite, "backbone stage {}", idx + 1);
            }
            Ok(act)
        };
        let a1 = stage(0, image)?;
        let y1 = nn::avg_pool(&a1, p1);
        let a2 = stage(1, &y1)?;
        let y2 = nn::avg_pool(&a2, p2);
        let a3 = stage(2, &y2)?;
        let y3 = nn::avg_pool(&a3, q);
        let a4 = stage(3, &y3)?;
        let mid = Tensor3::concat_channels(&y2, &nn::upsample_nearest(&y3, q))?;
        let high = nn::upsample_nearest(&a4, q);
        Ok(BackboneTrace { image: image.clone(), a1, y1, a2, y2, a3, mid, high })
    }

    /// Accumulates parameter gradients for `d loss / d F`. The high-level
    /// output is gradient-stopped, so stage 4 never receives gradient.
    pub fn backward(&self, trace: &BackboneTrace, d_mid: &Tensor3, grad: &mut Backbone) -> Result<()> {
        let (p1, p2, q) = self.config.pools();
        if d_mid.dims() != trace.mid.dims() {
            bail!(Shape, "feature gradient has the wrong shape");
        }
        let (mut d_y2, d_up3) = d_mid.split_channels(self.config.widths[1])?;
        let d_y3 = nn::upsample_nearest_backward(&d_up3, q);
        let d_a3 = nn::avg_pool_backward(&d_y3, q);
        let d_z3 = nn::tanh_backward(&trace.a3, &d_a3);
        let d_in3 = self.stages[2].backward(&trace.y2, &d_z3, &mut grad.stages[2], true).expect("dx");
        d_y2.add_assign(&d_in3);
        let d_a2 = nn::avg_pool_backward(&d_y2, p2);
        let d_z2 = nn::tanh_backward(&trace.a2, &d_a2);
        let d_y1 = self.stages[1].backward(&trace.y1, &d_z2, &mut grad.stages[1], true).expect("dx");
        let d_a1 = nn::avg_pool_backward(&d_y1, p1);
        let d_z1 = nn::tanh_backward(&trace.a1, &d_a1);
        self.stages[0].backward(&trace.image, &d_z1, &mut grad.stages[0], false);
        Ok(())
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        let (p1, p2, q) = self.config.pools();
        let (h, w) = (self.config.height, self.config.width);
        self.stages[0].macs(h, w)
            + self.stages[1].macs(h / p1, w / p1)
            + self.stages[2].macs(h / p1 / p2, w / p1 / p2)
            + self.stages[3].macs(h / p1 / p2 / q, w / p1 / p2 / q)
    }
}

impl Params for Backbone {
    fn tensors(&self) -> Vec<&[f64]> {
        self.stages.iter().flat_map(|s| s.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.stages.iter_mut().flat_map(|s| s.tensors_mut()).collect()
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    image: Tensor3,
    a1: Tensor3,
    y1: Tensor3,
    a2: Tensor3,
    y2: Tensor3,
    a3: Tensor3,
    /// Comparison features `F`.
    pub mid: Tensor3,
    /// Clustering features `F_bar`.
    pub high: Tensor3,
}

/// Features of one image together with its mask at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub mid: Tensor3,
    pub high: Tensor3,
    pub mask: Mask,
}

pub fn extract_features(image: &Tensor3, mask: &Mask, backbone: &Backbone) -> Result<FeaturePack> {
    let trace = backbone.forward(image)?;
    let (h, w) = backbone.config.feature_size();
    let mask = downsample_mask(mask, h, w)?;
    Ok(FeaturePack { mid: trace.mid, high: trace.high, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_stride() {
        let bb = Backbone::init(BackboneConfig::default(), 0).unwrap();
        let img = Tensor3::zeros(32, 32, 3);
        let pack = extract_features(&img, &Mask::ones(32, 32), &bb).unwrap();
        assert_eq!(pack.mid.dims(), (8, 8, 24));
        assert_eq!(pack.high.dims(), (8, 8, 16));
        assert!(pack.mid.is_finite() && pack.high.is_finite());
        assert_eq!(pack.mask, Mask::ones(8, 8));
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = Backbone::init(BackboneConfig::default(), 0).unwrap();
        let b = Backbone::init(BackboneConfig::default(), 0).unwrap();
        assert_eq!(a, b);
        assert!(a.param_count() > 0);
        let bad = BackboneConfig { stride: 5, ..Default::default() };
        assert!(matches!(Backbone::init(bad, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn odd_stride_still_produces_aligned_grids() {
        let cfg = BackboneConfig { height: 30, width: 30, widths: [4, 4, 4, 4], stride: 3 };
        let bb = Backbone::init(cfg, 1).unwrap();
        let t = bb.forward(&Tensor3::filled(30, 30, 3, 0.5)).unwrap();
        assert_eq!(t.mid.dims(), (10, 10, 8));
        assert_eq!(t.high.dims(), (10, 10, 4));
    }
}
