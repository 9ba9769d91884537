//! Prototype generation: masked average pooling, cosine k-means partitioning
//! of the high-level grid, foreground removal, and the fixed spatial-bin
//! partitioner used as an ablation comparator.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::tensor::{Mask, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeKind {
    /// Pooled from support foreground.
    ClassSpecific,
    /// Pooled from one background region of an image.
    ClassAgnostic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub kind: PrototypeKind,
    /// Number of pooled cells.
    pub area: usize,
}

/// Mean of the feature vectors under `mask`.
pub fn masked_average_pool(features: &Tensor3, mask: &Mask, kind: PrototypeKind) -> Result<Prototype> {
    if (features.height(), features.width()) != mask.dims() {
        bail!(Shape, "mask and feature grid differ in size");
    }
    let area = mask.count();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let mut vector = vec![0.0; features.channels()];
    for idx in mask.indices() {
        for (acc, v) in vector.iter_mut().zip(features.cell_flat(idx)) {
            *acc += v;
        }
    }
    let inv = 1.0 / area as f64;
    vector.iter_mut().for_each(|v| *v *= inv);
    Ok(Prototype { vector, kind, area })
}

/// Spreads `d loss / d prototype` uniformly over the pooled cells of `d_features`.
pub fn masked_average_pool_backward(d_proto: &[f64], mask: &Mask, d_features: &mut Tensor3) {
    let inv = 1.0 / mask.count() as f64;
    for idx in mask.indices() {
        for (g, d) in d_features.cell_flat_mut(idx).iter_mut().zip(d_proto) {
            *g += d * inv;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionOrigin {
    KMeans,
    Spp,
    /// Nearest-prototype assignment against prototypes from another image.
    Transfer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMasks {
    pub masks: Vec<Mask>,
    pub origin: PartitionOrigin,
}

impl PartitionMasks {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Per-cell region index, `None` for uncovered cells.
    pub fn label_map(&self) -> Vec<Option<usize>> {
        let Some(first) = self.masks.first() else { return Vec::new() };
        let mut labels = vec![None; first.height() * first.width()];
        for (k, m) in self.masks.iter().enumerate() {
            for idx in m.indices() {
                labels[idx] = Some(k);
            }
        }
        labels
    }
}

/// `1 - cos(a, b)`, with the cosine of a zero vector defined as 0.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (libm::sqrt(na) * libm::sqrt(nb))
}

/// Per-iteration record of a k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansStep {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub partition: PartitionMasks,
    /// State after seeding followed by one entry per accepted iteration.
    pub history: Vec<KMeansStep>,
    pub iterations: usize,
}

/// Hard cosine k-means over the cells of `features`, returning one mask per
/// non-empty cluster.
pub fn kmeans_partition<R: Rng + ?Sized>(
    features: &Tensor3,
    n: usize,
    iters: usize,
    rng: &mut R,
) -> Result<PartitionMasks> {
    Ok(kmeans_traced(features, n, iters, rng)?.partition)
}

/// [`kmeans_partition`] with the full iteration history.
///
/// Seeding is k-means++ under cosine distance. Each iteration recomputes
/// centroids as the mean direction of their members, reassigns every cell to
/// its nearest centroid (ties to the lowest index), then re-seeds any empty
/// cluster from the cell farthest from its centroid. An iteration that would
/// raise the objective is rejected and ends the run, so the recorded
/// objective is non-increasing.
pub fn kmeans_traced<R: Rng + ?Sized>(features: &Tensor3, n: usize, iters: usize, rng: &mut R) -> Result<KMeansRun> {
    let cells = features.cells();
    if n == 0 || iters == 0 {
        bail!(Config, "k-means needs n >= 1 and iters >= 1");
    }
    if n > cells {
        bail!(Config, "cannot form {n} clusters from {cells} cells");
    }
    let unit: Vec<Option<Vec<f64>>> = (0..cells).map(|i| normalized(features.cell_flat(i))).collect();
    if unit.iter().all(Option::is_none) {
        bail!(Degenerate, "all clustering features are zero");
    }
    let mut centroids = seed_centroids(&unit, n, rng);
    let (mut assignment, mut dist) = assign(&unit, &centroids);
    reseed_empty(&unit, &mut centroids, &mut assignment, &mut dist);
    let mut objective = sum(&dist);
    let mut history = vec![KMeansStep { assignment: assignment.clone(), centroids: centroids.clone(), objective }];
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        let mut next_centroids = centroids.clone();
        for (k, c) in next_centroids.iter_mut().enumerate() {
            let mut acc = vec![0.0; features.channels()];
            for (u, _) in unit.iter().zip(&assignment).filter(|(_, &a)| a == k) {
                if let Some(u) = u {
                    acc.iter_mut().zip(u).for_each(|(a, v)| *a += v);
                }
            }
            if let Some(dir) = normalized(&acc) {
                *c = dir;
            }
        }
        let (mut next_assignment, mut next_dist) = assign(&unit, &next_centroids);
        reseed_empty(&unit, &mut next_centroids, &mut next_assignment, &mut next_dist);
        let next_objective = sum(&next_dist);
        if next_objective > objective {
            break;
        }
        let converged = next_assignment == assignment && next_centroids == centroids;
        centroids = next_centroids;
        assignment = next_assignment;
        objective = next_objective;
        history.push(KMeansStep { assignment: assignment.clone(), centroids: centroids.clone(), objective });
        if converged {
            break;
        }
    }
    let masks = (0..n)
        .map(|k| Mask::from_vec(features.height(), features.width(), assignment.iter().map(|&a| a == k).collect()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|m| !m.is_empty())
        .collect();
    Ok(KMeansRun { partition: PartitionMasks { masks, origin: PartitionOrigin::KMeans }, history, iterations })
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

fn unit_distance(u: &Option<Vec<f64>>, centroid: &[f64]) -> f64 {
    match u {
        Some(u) => 1.0 - u.iter().zip(centroid).map(|(a, b)| a * b).sum::<f64>(),
        None => 1.0,
    }
}

fn sum(values: &[f64]) -> f64 {
    values.iter().sum()
}

fn assign(unit: &[Option<Vec<f64>>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    unit.iter()
        .map(|u| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids.iter().enumerate() {
                let d = unit_distance(u, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .unzip()
}

/// k-means++ seeding: first centre uniform over non-zero cells, then
/// proportional to the distance to the nearest chosen centre. When every
/// remaining cell coincides with a chosen centre, the leftover centroids
/// duplicate the first one and stay empty.
fn seed_centroids<R: Rng + ?Sized>(unit: &[Option<Vec<f64>>], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let live: Vec<&Vec<f64>> = unit.iter().flatten().collect();
    let mut centroids = vec![live[rng.gen_range(0..live.len())].clone()];
    let mut nearest: Vec<f64> = live.iter().map(|u| unit_distance(&Some((*u).clone()), &centroids[0])).collect();
    while centroids.len() < n {
        let total: f64 = nearest.iter().map(|d| d.max(0.0)).sum();
        if total <= 0.0 {
            centroids.push(centroids[0].clone());
            continue;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut pick = live.len() - 1;
        for (i, d) in nearest.iter().enumerate() {
            let d = d.max(0.0);
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let chosen = live[pick].clone();
        for (d, u) in nearest.iter_mut().zip(&live) {
            let nd = 1.0 - u.iter().zip(&chosen).map(|(a, b)| a * b).sum::<f64>();
            if nd < *d {
                *d = nd;
            }
        }
        centroids.push(chosen);
    }
    centroids
}

/// Moves the farthest cell (taken from a cluster with more than one member)
/// into each empty cluster. Stops when no cell has positive distance left.
fn reseed_empty(unit: &[Option<Vec<f64>>], centroids: &mut [Vec<f64>], assignment: &mut [usize], dist: &mut [f64]) {
    let n = centroids.len();
    for k in 0..n {
        let mut sizes = vec![0usize; n];
        assignment.iter().for_each(|&a| sizes[a] += 1);
        if sizes[k] > 0 {
            continue;
        }
        let candidate = (0..assignment.len())
            .filter(|&i| sizes[assignment[i]] > 1 && unit[i].is_some() && dist[i] > 0.0)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = candidate else { continue };
        centroids[k] = unit[i].clone().expect("non-zero cell");
        assignment[i] = k;
        dist[i] = unit_distance(&unit[i], &centroids[k]).max(0.0).min(dist[i]);
    }
}

/// Removes the query foreground from every region and drops regions that
/// become empty.
pub fn remove_foreground(partition: &PartitionMasks, foreground: &Mask) -> Result<PartitionMasks> {
    if partition.masks.iter().any(|m| m.dims() != foreground.dims()) {
        bail!(Shape, "partition and foreground mask differ in size");
    }
    let masks: Vec<Mask> =
        partition.masks.iter().map(|m| m.minus(foreground)).filter(|m| !m.is_empty()).collect();
    if masks.is_empty() {
        bail!(Degenerate, "no background left after foreground removal");
    }
    Ok(PartitionMasks { masks, origin: partition.origin })
}

/// One class-agnostic prototype per background region, in region order.
pub fn class_agnostic_prototypes(features: &Tensor3, regions: &PartitionMasks) -> Result<Vec<Prototype>> {
    regions
        .masks
        .iter()
        .map(|m| masked_average_pool(features, m, PrototypeKind::ClassAgnostic))
        .collect()
}

/// `a × a` rectangular bins with edges at `floor(i * h / a)` and `floor(j * w / a)`.
pub fn spp_partition(h: usize, w: usize, a: usize) -> Result<PartitionMasks> {
    if a == 0 || a > h.min(w) {
        bail!(Config, "pyramid level {a} out of range for a {h}x{w} grid");
    }
    let mut masks = Vec::with_capacity(a * a);
    for bi in 0..a {
        let rows = bi * h / a..(bi + 1) * h / a;
        for bj in 0..a {
            let cols = bj * w / a..(bj + 1) * w / a;
            masks.push(Mask::from_fn(h, w, |i, j| rows.contains(&i) && cols.contains(&j)));
        }
    }
    Ok(PartitionMasks { masks, origin: PartitionOrigin::Spp })
}

/// Assigns every cell of `features` to the nearest prototype by cosine
/// distance. Used when background prototypes come from a different image
/// than the one they are paired with.
pub fn nearest_prototype_partition(features: &Tensor3, protos: &[Prototype]) -> Result<PartitionMasks> {
    if protos.is_empty() {
        bail!(Contract, "no prototypes to assign");
    }
    let labels: Vec<usize> = (0..features.cells())
        .map(|idx| {
            let f = features.cell_flat(idx);
            let mut best = (0, f64::INFINITY);
            for (k, p) in protos.iter().enumerate() {
                let d = cosine_distance(f, &p.vector);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect();
    let masks = (0..protos.len())
        .map(|k| Mask::from_vec(features.height(), features.width(), labels.iter().map(|&l| l == k).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PartitionMasks { masks, origin: PartitionOrigin::Transfer })
}
