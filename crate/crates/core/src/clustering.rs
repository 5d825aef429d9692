//! K-means prototype learning, ROI and voxel labeling, prototype histograms.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureModel, RoiFeature};
use crate::merging::LineageEntry;
use crate::volume::{coords, linear_index, Mask};

/// Simplex tolerance for histograms.
pub const HISTOGRAM_SUM_TOL: f64 = 1e-6;

/// Benchmark prototype count.
pub const DEFAULT_K: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 300,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Objective after every assignment step, non-increasing.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest row index, its squared distance, and the squared distance of the
/// runner-up (infinite when there is one row).
#[inline]
fn nearest_two(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64, f64) {
    let (mut best, mut best_d, mut second_d) = (0, f64::INFINITY, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            second_d = best_d;
            best = i;
            best_d = d;
        } else if d < second_d {
            second_d = d;
        }
    }
    (best, best_d, second_d)
}

/// Half the distance from each centroid to its closest other centroid.
fn half_separation(centroids: &[f64], dim: usize, k: usize) -> Vec<f64> {
    let mut out = vec![f64::INFINITY; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = 0.5 * sq_dist(&centroids[i * dim..(i + 1) * dim], &centroids[j * dim..(j + 1) * dim]).sqrt();
            out[i] = out[i].min(d);
            out[j] = out[j].min(d);
        }
    }
    // Shrink slightly so rounding cannot make a tie look strict.
    out.iter_mut().for_each(|v| *v *= 1.0 - 1e-9);
    out
}

fn plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // Guard against rounding leaving `chosen` on a zero-weight point.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let c = centroids[start..].to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, w)| {
            let d = sq_dist(&points[i * dim..(i + 1) * dim], &c);
            if d < *w {
                *w = d;
            }
        });
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// `points` is row-major `n × dim`. Empty clusters are re-seeded with the
/// point farthest from its current centroid.
pub fn kmeans(points: &[f64], dim: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} values do not form rows of length {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    let k = cfg.k;
    if k == 0 {
        return Err(Error::config("k", "must be positive"));
    }
    if n < k {
        return Err(Error::TooFew {
            what: "points for k-means",
            needed: k,
            got: n,
        });
    }
    let mut rng = crate::seed::rng(cfg.seed);
    let mut centroids = plus_plus_init(points, dim, k, &mut rng);
    let mut history: Vec<f64> = Vec::new();
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    // Lower bound on the distance from each point to its second-nearest
    // centroid; zero forces a full scan.
    let mut lower = vec![0.0f64; n];
    let mut converged = false;
    let mut iterations = 0;

    loop {
        let half_gap = half_separation(&centroids, dim, k);
        points
            .par_chunks_exact(dim)
            .zip(assignments.par_iter_mut())
            .zip(dists.par_iter_mut())
            .zip(lower.par_iter_mut())
            .for_each(|(((p, a), d2), l)| {
                let own = sq_dist(p, &centroids[*a * dim..(*a + 1) * dim]);
                let u = own.sqrt();
                if u < l.max(half_gap[*a]) {
                    *d2 = own;
                } else {
                    let (best, best_d2, second_d2) = nearest_two(p, &centroids, dim);
                    *a = best;
                    *d2 = best_d2;
                    *l = second_d2.sqrt();
                }
            });

        // Refill empty clusters from the worst-fit points.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for empty in (0..k).filter(|&c| counts[c] == 0).collect::<Vec<_>>() {
            // n >= k guarantees some cluster has two or more members.
            let far = dists
                .iter()
                .enumerate()
                .filter(|&(i, _)| counts[assignments[i]] > 1)
                .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                .0;
            counts[assignments[far]] -= 1;
            assignments[far] = empty;
            counts[empty] = 1;
            dists[far] = 0.0;
            centroids[empty * dim..(empty + 1) * dim]
                .copy_from_slice(&points[far * dim..(far + 1) * dim]);
            lower.iter_mut().for_each(|l| *l = 0.0);
        }

        let objective: f64 = dists.iter().sum();
        if let Some(&prev) = history.last() {
            debug_assert!(
                objective <= prev * (1.0 + 1e-12) + 1e-300,
                "k-means objective increased: {prev} -> {objective}"
            );
        }
        history.push(objective);

        if iterations >= cfg.max_iter || converged {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * dim];
        for (p, &a) in points.chunks_exact(dim).zip(&assignments) {
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for d in 0..dim {
                let v = sums[c * dim + d] * inv;
                let old = centroids[c * dim + d];
                moved += (v - old) * (v - old);
                centroids[c * dim + d] = v;
            }
            shift = shift.max(moved.sqrt());
        }
        // Slack for rounding in the bound arithmetic.
        let slack = shift * (1.0 + 1e-9) + 1e-12;
        lower.iter_mut().for_each(|l| *l = (*l - slack).max(0.0));
        converged = shift < cfg.tol;
    }
    log::debug!("k-means k = {k}, n = {n}: {iterations} iterations, converged = {converged}");

    Ok(KMeansResult {
        dim,
        centroids,
        assignments,
        objective_history: history,
        iterations,
        converged,
    })
}

/// Learned texture prototypes.
///
/// Prototype `i` has the `i`-th lowest mean ROI intensity; `order[i]` is the
/// raw K-means cluster it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeModel {
    pub k: usize,
    pub feature_kind: FeatureKind,
    pub centroids: Vec<Vec<f64>>,
    pub order: Vec<usize>,
    /// Mean of the member ROIs' mean mapped intensity.
    pub mean_intensity: Vec<f64>,
    pub member_counts: Vec<usize>,
    /// Benchmark-model prototype each entry descends from (identity before merging).
    pub source_ids: Vec<usize>,
    pub lineage: Vec<LineageEntry>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<FeatureModel>,
}

impl PrototypeModel {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i]
    }
}

#[derive(Debug, Clone)]
pub struct PrototypeFit {
    pub model: PrototypeModel,
    /// Prototype of each training ROI, in model numbering.
    pub assignments: Vec<usize>,
    pub kmeans: KMeansResult,
}

/// Sorts cluster ids by mean intensity (ties by id) and returns
/// `(order, mean_intensity_sorted, counts_sorted)`.
pub(crate) fn intensity_order(
    labels: &[usize],
    roi_means: &[f64],
    k: usize,
) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&l, &m) in labels.iter().zip(roi_means) {
        sum[l] += m;
        count[l] += 1;
    }
    let means: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::INFINITY })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let sorted_means = order.iter().map(|&c| means[c]).collect();
    let sorted_counts = order.iter().map(|&c| count[c]).collect();
    (order, sorted_means, sorted_counts)
}

/// Clusters ROI features into `k` prototypes ordered by ascending intensity.
pub fn fit_prototypes(
    features: &[RoiFeature],
    roi_mean_intensities: &[f64],
    k: usize,
    seed: u64,
) -> Result<PrototypeFit> {
    if features.len() != roi_mean_intensities.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} features vs {} ROI intensities",
            features.len(),
            roi_mean_intensities.len()
        )));
    }
    let kind = features.first().map(|f| f.kind).ok_or(Error::TooFew {
        what: "ROIs",
        needed: k.max(1),
        got: 0,
    })?;
    if let Some(f) = features.iter().find(|f| f.kind != kind) {
        return Err(Error::KindMismatch {
            expected: kind.to_string(),
            got: f.kind.to_string(),
        });
    }
    let dim = features[0].values.len();
    let flat: Vec<f64> = features.iter().flat_map(|f| f.values.iter().copied()).collect();
    let km = kmeans(&flat, dim, &KMeansConfig::new(k, seed))?;
    let (order, mean_intensity, member_counts) =
        intensity_order(&km.assignments, roi_mean_intensities, k);
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    let centroids = order.iter().map(|&c| km.centroid(c).to_vec()).collect();
    let assignments = km.assignments.iter().map(|&c| rank[c]).collect();
    Ok(PrototypeFit {
        model: PrototypeModel {
            k,
            feature_kind: kind,
            centroids,
            order,
            mean_intensity,
            member_counts,
            source_ids: (0..k).collect(),
            lineage: Vec::new(),
            seed,
            feature: None,
        },
        assignments,
        kmeans: km,
    })
}

/// Nearest prototype in Euclidean distance; ties go to the lower index.
pub fn assign_prototype(f: &RoiFeature, model: &PrototypeModel) -> Result<usize> {
    if f.kind != model.feature_kind {
        return Err(Error::KindMismatch {
            expected: model.feature_kind.to_string(),
            got: f.kind.to_string(),
        });
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in model.centroids.iter().enumerate() {
        if c.len() != f.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "feature length {} vs centroid length {}",
                f.values.len(),
                c.len()
            )));
        }
        let d = sq_dist(&f.values, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// A sample point in voxel coordinates carrying a prototype label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub voxel: [usize; 3],
    pub label: usize,
}

pub const UNLABELED: u32 = u32::MAX;

/// Dense per-voxel prototype labels; non-lung voxels hold [`UNLABELED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
}

/// Gives every lung voxel the label of its nearest sample point (physical mm).
/// Ties go to the sample point with the lower linear voxel index.
pub fn label_volume(
    mask: &Mask,
    spacing_mm: [f64; 3],
    points: &[LabeledPoint],
) -> Result<LabelMap> {
    if points.is_empty() {
        return Err(Error::TooFew {
            what: "labeled sample points",
            needed: 1,
            got: 0,
        });
    }
    let dims = mask.dims();
    let mut sites: Vec<(usize, [usize; 3], u32)> = points
        .iter()
        .map(|p| (linear_index(dims, p.voxel), p.voxel, p.label as u32))
        .collect();
    // Scanning in linear-index order makes strict `<` implement the tie rule.
    sites.sort_by_key(|s| s.0);
    let labels = (0..mask.data().len())
        .into_par_iter()
        .map(|i| {
            if !mask.is_lung(i) {
                return UNLABELED;
            }
            let c = coords(dims, i);
            let mut best = (f64::INFINITY, UNLABELED);
            for (_, s, label) in &sites {
                let d: f64 = (0..3)
                    .map(|a| ((c[a] as f64 - s[a] as f64) * spacing_mm[a]).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, *label);
                }
            }
            best.1
        })
        .collect();
    Ok(LabelMap { dims, labels })
}

/// Normalized prototype frequencies of one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeHistogram {
    pub values: Vec<f64>,
}

impl PrototypeHistogram {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.is_empty()
            || values.iter().any(|v| !(*v >= 0.0))
            || (sum - 1.0).abs() > HISTOGRAM_SUM_TOL
        {
            return Err(Error::Invalid(format!(
                "prototype histogram is not a distribution (sum {sum})"
            )));
        }
        Ok(Self { values })
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }
}

/// Histogram over sample-point labels.
pub fn prototype_histogram(labels: &[usize], k: usize) -> Result<PrototypeHistogram> {
    if labels.is_empty() {
        return Err(Error::TooFew {
            what: "labeled sample points",
            needed: 1,
            got: 0,
        });
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::Invalid(format!("label {l} out of range for K = {k}")));
        }
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    Ok(PrototypeHistogram {
        values: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Histogram over a dense voxel labeling.
pub fn dense_prototype_histogram(map: &LabelMap, k: usize) -> Result<PrototypeHistogram> {
    let labels: Vec<usize> = map
        .labels
        .iter()
        .filter(|&&l| l != UNLABELED)
        .map(|&l| l as usize)
        .collect();
    prototype_histogram(&labels, k)
}

/// Helper used across the pipeline: the kind check plus assignment for a batch.
pub fn assign_all(features: &[RoiFeature], model: &PrototypeModel) -> Result<Vec<usize>> {
    features
        .par_iter()
        .map(|f| assign_prototype(f, model))
        .collect()
}

pub(crate) fn check_kind(kind: FeatureKind, model: &PrototypeModel) -> Result<()> {
    if kind != model.feature_kind {
        return Err(Error::KindMismatch {
            expected: model.feature_kind.to_string(),
            got: kind.to_string(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn feature(values: Vec<f64>) -> RoiFeature {
        RoiFeature {
            kind: FeatureKind::Texton,
            values,
        }
    }

    #[test]
    fn separable_points() {
        let r = kmeans(&[0.0, 10.0], 1, &KMeansConfig::new(2, 1)).unwrap();
        let mut c = r.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(r.objective(), 0.0);
    }

    #[test]
    fn k_equals_n_has_zero_objective() {
        let pts: Vec<f64> = (0..14).map(|i| (i * i) as f64 * 0.37).collect();
        let r = kmeans(&pts, 2, &KMeansConfig::new(7, 9)).unwrap();
        assert_eq!(r.objective(), 0.0);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans(&[1.0, 2.0], 1, &KMeansConfig::new(3, 0)),
            Err(Error::TooFew { .. })
        ));
    }

    /// Exact 2-means in 1D: the optimal partition is a split of the sorted values.
    fn exact_two_means_1d(xs: &[f64]) -> (f64, f64) {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for cut in 1..v.len() {
            let (a, b) = v.split_at(cut);
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                best = (cost, ma, mb);
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn two_blobs_match_exact_partition() {
        let mut rng = crate::seed::rng(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..200)
            .map(|i| if i % 2 == 0 { -10.0 } else { 10.0 } + noise.sample(&mut rng))
            .collect();
        let (lo, hi) = exact_two_means_1d(&xs);
        let r = kmeans(&xs, 1, &KMeansConfig::new(2, 11)).unwrap();
        let mut c = r.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - lo).abs() < 1e-9 && (c[1] - hi).abs() < 1e-9);
        assert!((c[0] + 10.0).abs() < 0.5 && (c[1] - 10.0).abs() < 0.5);
    }

    #[test]
    fn prototypes_sorted_by_intensity() {
        let mut feats = Vec::new();
        let mut means = Vec::new();
        for i in 0..20 {
            let bright = i % 2 == 0;
            let mut v = vec![0.0; 4];
            v[if bright { 0 } else { 3 }] = 1.0;
            v[1] = i as f64 * 1e-3;
            feats.push(feature(v));
            means.push(if bright { 0.9 } else { 0.1 });
        }
        let fit = fit_prototypes(&feats, &means, 2, 4).unwrap();
        assert!((fit.model.mean_intensity[0] - 0.1).abs() < 1e-12);
        assert!((fit.model.mean_intensity[1] - 0.9).abs() < 1e-12);
        assert!(fit.model.centroid(0)[3] > 0.5);
        assert_eq!(fit.assignments[1], 0);
        assert_eq!(fit.assignments[0], 1);

        let single = fit_prototypes(&feats, &means, 1, 4).unwrap();
        assert_eq!(single.model.order, vec![0]);
    }

    #[test]
    fn prototype_order_follows_generator_means() {
        // Six generators, feature = one-hot position jittered; intensities known.
        let gen_mean = [0.7, 0.2, 0.5, 0.9, 0.1, 0.35];
        let mut rng = crate::seed::rng(8);
        let mut feats = Vec::new();
        let mut means = Vec::new();
        for i in 0..300 {
            let g = i % 6;
            let mut v = vec![0.0; 6];
            v[g] = 1.0 + rng.random_range(-0.05..0.05);
            feats.push(feature(v));
            means.push(gen_mean[g] + rng.random_range(-0.01..0.01));
        }
        let fit = fit_prototypes(&feats, &means, 6, 2).unwrap();
        let mut oracle: Vec<usize> = (0..6).collect();
        oracle.sort_by(|&a, &b| gen_mean[a].total_cmp(&gen_mean[b]));
        for (rank, &g) in oracle.iter().enumerate() {
            let c = fit.model.centroid(rank);
            let argmax = (0..6).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
            assert_eq!(argmax, g);
        }
    }

    fn toy_model(centroids: Vec<Vec<f64>>) -> PrototypeModel {
        let k = centroids.len();
        PrototypeModel {
            k,
            feature_kind: FeatureKind::Texton,
            centroids,
            order: (0..k).collect(),
            mean_intensity: vec![0.0; k],
            member_counts: vec![1; k],
            source_ids: (0..k).collect(),
            lineage: vec![],
            seed: 0,
            feature: None,
        }
    }

    #[test]
    fn assignment_ties_and_kind() {
        let m = toy_model(vec![vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(assign_prototype(&feature(vec![1.0, 0.0]), &m).unwrap(), 0);
        assert_eq!(assign_prototype(&feature(vec![2.0, 0.0]), &m).unwrap(), 1);
        let dog = RoiFeature {
            kind: FeatureKind::Dog2,
            values: vec![0.0, 0.0],
        };
        assert!(matches!(assign_prototype(&dog, &m), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn single_site_and_bisector() {
        let dims = [9, 3, 1];
        let mask = Mask::full(dims).unwrap();
        let one = label_volume(&mask, [1.0; 3], &[LabeledPoint { voxel: [4, 1, 0], label: 7 }])
            .unwrap();
        assert!(one.labels.iter().all(|&l| l == 7));

        let two = label_volume(
            &mask,
            [1.0; 3],
            &[
                LabeledPoint { voxel: [6, 1, 0], label: 1 },
                LabeledPoint { voxel: [2, 1, 0], label: 0 },
            ],
        )
        .unwrap();
        for y in 0..3 {
            for x in 0..9 {
                let l = two.labels[x + 9 * y];
                // x = 4 is equidistant; the lower linear index site (x = 2) wins.
                assert_eq!(l, if x <= 4 { 0 } else { 1 }, "x = {x}");
            }
        }
    }

    #[test]
    fn label_volume_matches_brute_force() {
        let dims = [16, 12, 10];
        let spacing = [0.7, 0.9, 1.3];
        let mut rng = crate::seed::rng(21);
        let mask_data: Vec<u8> = (0..dims.iter().product::<usize>())
            .map(|_| u8::from(rng.random::<f64>() < 0.8))
            .collect();
        let mask = Mask::new(dims, mask_data).unwrap();
        let points: Vec<LabeledPoint> = (0..50)
            .map(|i| LabeledPoint {
                voxel: [
                    rng.random_range(0..dims[0]),
                    rng.random_range(0..dims[1]),
                    rng.random_range(0..dims[2]),
                ],
                label: i % 6,
            })
            .collect();
        let map = label_volume(&mask, spacing, &points).unwrap();
        for i in 0..mask.data().len() {
            if !mask.is_lung(i) {
                assert_eq!(map.labels[i], UNLABELED);
                continue;
            }
            let c = coords(dims, i);
            let mut best: Option<(f64, usize, usize)> = None;
            for p in &points {
                let d: f64 = (0..3)
                    .map(|a| ((c[a] as f64 - p.voxel[a] as f64) * spacing[a]).powi(2))
                    .sum();
                let li = linear_index(dims, p.voxel);
                let better = match best {
                    None => true,
                    Some((bd, bl, _)) => d < bd || (d == bd && li < bl),
                };
                if better {
                    best = Some((d, li, p.label));
                }
            }
            assert_eq!(map.labels[i] as usize, best.unwrap().2);
        }
    }

    #[test]
    fn histograms() {
        assert_eq!(
            prototype_histogram(&[3, 3, 3], 5).unwrap().values,
            vec![0.0, 0.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(prototype_histogram(&[0, 0, 1, 1], 2).unwrap().values, vec![0.5, 0.5]);
        assert!(prototype_histogram(&[], 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn kmeans_objective_never_increases(seed in any::<u64>(), n in 12usize..80, k in 1usize..8) {
            let mut rng = crate::seed::rng(seed);
            let pts: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let r = kmeans(&pts, 3, &KMeansConfig::new(k.min(n), seed)).unwrap();
            for w in r.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            let again = kmeans(&pts, 3, &KMeansConfig::new(k.min(n), seed)).unwrap();
            prop_assert_eq!(r.centroids, again.centroids);
        }

        #[test]
        fn centroids_assign_to_themselves(seed in any::<u64>(), k in 1usize..10) {
            let mut rng = crate::seed::rng(seed);
            let cents: Vec<Vec<f64>> = (0..k).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
            let m = toy_model(cents.clone());
            for (i, c) in cents.into_iter().enumerate() {
                prop_assert_eq!(assign_prototype(&feature(c), &m).unwrap(), i);
            }
        }

        #[test]
        fn assignment_is_exhaustive_argmin(seed in any::<u64>()) {
            let mut rng = crate::seed::rng(seed);
            let cents: Vec<Vec<f64>> = (0..9).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let f: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let m = toy_model(cents.clone());
            let d: Vec<f64> = cents.iter().map(|c| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let oracle = (0..9).fold(0, |b, i| if d[i] < d[b] { i } else { b });
            prop_assert_eq!(assign_prototype(&feature(f), &m).unwrap(), oracle);
        }

        #[test]
        fn histogram_is_a_distribution(labels in proptest::collection::vec(0usize..7, 1..200)) {
            let h = prototype_histogram(&labels, 7).unwrap();
            prop_assert_eq!(h.k(), 7);
            prop_assert!((h.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
