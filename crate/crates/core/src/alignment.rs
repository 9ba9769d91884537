//! Pairing prototypes with query features.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::prototypes::{PartitionMasks, Prototype, PrototypeKind};
use crate::tensor::{Mask, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Support prototype against query features.
    SupportQuery,
    /// Query background prototypes against query features.
    QueryQuery,
}

/// `h × w × 2c` grid: prototype channels first, then the query feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTensor {
    pub x: Tensor3,
    pub branch: Branch,
    /// For [`Branch::QueryQuery`], which prototype each cell was paired with.
    pub provenance: Option<Vec<usize>>,
    /// For [`Branch::QueryQuery`], the prototype placed on the foreground.
    pub foreground_pick: Option<usize>,
}

impl FusedTensor {
    pub fn prototype_channels(&self) -> usize {
        self.x.channels() / 2
    }
}

fn fuse(query: &Tensor3, proto_of_cell: impl Fn(usize) -> usize, protos: &[&[f64]]) -> Tensor3 {
    let (h, w, c) = query.dims();
    let mut x = Tensor3::zeros(h, w, 2 * c);
    for idx in 0..h * w {
        let cell = x.cell_flat_mut(idx);
        cell[..c].copy_from_slice(protos[proto_of_cell(idx)]);
        cell[c..].copy_from_slice(query.cell_flat(idx));
    }
    x
}

/// Tiles the support prototype over the query grid.
pub fn expand_class_specific(proto: &Prototype, query: &Tensor3) -> Result<FusedTensor> {
    if proto.kind != PrototypeKind::ClassSpecific {
        bail!(Contract, "expected a class-specific prototype");
    }
    if proto.vector.len() != query.channels() {
        bail!(Shape, "prototype has {} channels, features have {}", proto.vector.len(), query.channels());
    }
    let x = fuse(query, |_| 0, &[&proto.vector]);
    Ok(FusedTensor { x, branch: Branch::SupportQuery, provenance: None, foreground_pick: None })
}

/// Places each background prototype on its own region and one randomly
/// drawn prototype on every foreground cell.
///
/// The draw consumes `rng` only when the foreground is non-empty.
pub fn assign_class_agnostic<R: Rng + ?Sized>(
    protos: &[Prototype],
    regions: &PartitionMasks,
    foreground: &Mask,
    query: &Tensor3,
    rng: &mut R,
) -> Result<FusedTensor> {
    if protos.is_empty() || protos.len() != regions.len() {
        bail!(Contract, "{} prototypes for {} regions", protos.len(), regions.len());
    }
    let c = query.channels();
    if protos.iter().any(|p| p.vector.len() != c) {
        bail!(Shape, "prototype width differs from feature width {c}");
    }
    if foreground.dims() != (query.height(), query.width()) {
        bail!(Shape, "foreground mask does not match the feature grid");
    }
    let labels = regions.label_map();
    let pick = (!foreground.is_empty()).then(|| rng.gen_range(0..protos.len()));
    let mut provenance = vec![0usize; query.cells()];
    for (idx, slot) in provenance.iter_mut().enumerate() {
        *slot = match (foreground.get_flat(idx), labels[idx], pick) {
            (true, None, Some(r)) => r,
            (false, Some(k), _) => k,
            _ => bail!(Invariant, "cell {idx} is not covered exactly once by foreground and regions"),
        };
    }
    let vectors: Vec<&[f64]> = protos.iter().map(|p| p.vector.as_slice()).collect();
    let x = fuse(query, |idx| provenance[idx], &vectors);
    Ok(FusedTensor { x, branch: Branch::QueryQuery, provenance: Some(provenance), foreground_pick: pick })
}

/// Splits `d loss / d X` into the gradient for the query features (added to
/// `d_query`) and one gradient per prototype.
pub fn fused_backward(fused: &FusedTensor, d_x: &Tensor3, n_protos: usize, d_query: &mut Tensor3) -> Vec<Vec<f64>> {
    let c = fused.prototype_channels();
    let mut d_protos = vec![vec![0.0; c]; n_protos];
    for idx in 0..d_x.cells() {
        let g = d_x.cell_flat(idx);
        let k = fused.provenance.as_ref().map_or(0, |p| p[idx]);
        d_protos[k].iter_mut().zip(&g[..c]).for_each(|(a, b)| *a += b);
        d_query.cell_flat_mut(idx).iter_mut().zip(&g[c..]).for_each(|(a, b)| *a += b);
    }
    d_protos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::PartitionOrigin;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proto(v: Vec<f64>, kind: PrototypeKind) -> Prototype {
        Prototype { vector: v, kind, area: 1 }
    }

    #[test]
    fn expansion_concatenates_and_slices_back() {
        let q = Tensor3::from_fn(3, 2, 2, |i, j, d| (i * 10 + j * 3 + d) as f64);
        let p = proto(vec![0.25, -1.0], PrototypeKind::ClassSpecific);
        let fused = expand_class_specific(&p, &q).unwrap();
        let (left, right) = fused.x.split_channels(2).unwrap();
        assert_eq!(right, q);
        assert_eq!(left, Tensor3::from_fn(3, 2, 2, |_, _, d| p.vector[d]));
        let wide = proto(vec![0.0; 3], PrototypeKind::ClassSpecific);
        assert!(matches!(expand_class_specific(&wide, &q), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn single_background_prototype_covers_everything() {
        let q = Tensor3::filled(2, 2, 1, 0.5);
        let fg = Mask::from_rows(&[[1, 0], [0, 0]]).unwrap();
        let regions = PartitionMasks { masks: vec![fg.not()], origin: PartitionOrigin::KMeans };
        let p = [proto(vec![3.0], PrototypeKind::ClassAgnostic)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fused = assign_class_agnostic(&p, &regions, &fg, &q, &mut rng).unwrap();
        assert_eq!(fused.provenance.unwrap(), [0; 4]);
        assert!((0..4).all(|i| fused.x.cell_flat(i) == [3.0, 0.5]));
    }

    #[test]
    fn empty_foreground_does_not_touch_rng() {
        let q = Tensor3::filled(2, 2, 1, 0.5);
        let fg = Mask::zeros(2, 2);
        let regions = PartitionMasks {
            masks: vec![Mask::from_rows(&[[1, 1], [0, 0]]).unwrap(), Mask::from_rows(&[[0, 0], [1, 1]]).unwrap()],
            origin: PartitionOrigin::KMeans,
        };
        let p = [proto(vec![1.0], PrototypeKind::ClassAgnostic), proto(vec![2.0], PrototypeKind::ClassAgnostic)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let before = rng.clone();
        let fused = assign_class_agnostic(&p, &regions, &fg, &q, &mut rng).unwrap();
        assert_eq!(rng, before);
        assert_eq!(fused.provenance.unwrap(), [0, 0, 1, 1]);
        assert_eq!(fused.foreground_pick, None);
    }

    #[test]
    fn uncovered_cell_is_an_invariant_error() {
        let q = Tensor3::filled(2, 2, 1, 0.5);
        let fg = Mask::from_rows(&[[1, 0], [0, 0]]).unwrap();
        let regions =
            PartitionMasks { masks: vec![Mask::from_rows(&[[0, 1], [0, 0]]).unwrap()], origin: PartitionOrigin::KMeans };
        let p = [proto(vec![1.0], PrototypeKind::ClassAgnostic)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(assign_class_agnostic(&p, &regions, &fg, &q, &mut rng), Err(crate::Error::Invariant(_))));
    }
}
