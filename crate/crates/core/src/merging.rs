//! Iterative prototype pruning.
//!
//! Each step ranks every live prototype pair twice: by mean pairwise χ²
//! distance between member features (rank 1 = closest) and by spatial
//! co-occurrence similarity (rank 1 = most co-occurring). The pair with the
//! smallest rank sum is merged.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{intensity_order, LabeledPoint, PrototypeModel};
use crate::error::{Error, Result};
use crate::features::RoiFeature;

pub const CHI2_EPS: f64 = 1e-12;
pub const MAX_DISTANCE_PAIRS: usize = 10_000;
pub const DEFAULT_NEIGHBORHOOD_VOXELS: usize = 10;

/// `Σ (h − g)² / (h + g + ε)`.
pub fn chi2_distance(h: &[f64], g: &[f64]) -> Result<f64> {
    if h.len() != g.len() {
        return Err(Error::DimensionMismatch(format!(
            "histograms of length {} and {}",
            h.len(),
            g.len()
        )));
    }
    Ok(h.iter()
        .zip(g)
        .map(|(a, b)| {
            let d = a - b;
            d * d / (a + b + CHI2_EPS)
        })
        .sum())
}

/// Mean χ² distance over all cross pairs of members, or over
/// [`MAX_DISTANCE_PAIRS`] pairs drawn with replacement when there are more.
pub fn inter_prototype_distance(members_i: &[&[f64]], members_j: &[&[f64]], seed: u64) -> Result<f64> {
    if members_i.is_empty() || members_j.is_empty() {
        return Err(Error::TooFew {
            what: "members per prototype",
            needed: 1,
            got: 0,
        });
    }
    let total = members_i.len() * members_j.len();
    let mut sum = 0.0;
    if total <= MAX_DISTANCE_PAIRS {
        for a in members_i {
            for b in members_j {
                sum += chi2_distance(a, b)?;
            }
        }
        Ok(sum / total as f64)
    } else {
        let mut rng = crate::seed::rng(seed);
        for _ in 0..MAX_DISTANCE_PAIRS {
            let a = members_i[rng.random_range(0..members_i.len())];
            let b = members_j[rng.random_range(0..members_j.len())];
            sum += chi2_distance(a, b)?;
        }
        Ok(sum / MAX_DISTANCE_PAIRS as f64)
    }
}

/// Counts of unordered same-scan sample-point pairs, by label pair.
///
/// Off-diagonal entries are stored symmetrically; a pair sharing label `i`
/// adds one to `q(i, i)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    pub k: usize,
    pub neighborhood_voxels: usize,
    q: Vec<u64>,
}

impl CooccurrenceMatrix {
    pub fn from_counts(k: usize, neighborhood_voxels: usize, q: Vec<u64>) -> Result<Self> {
        if q.len() != k * k {
            return Err(Error::DimensionMismatch(format!(
                "{} counts for a {k}x{k} matrix",
                q.len()
            )));
        }
        Ok(Self {
            k,
            neighborhood_voxels,
            q,
        })
    }

    #[inline]
    pub fn q(&self, i: usize, j: usize) -> u64 {
        self.q[i * self.k + j]
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.q[i * self.k..(i + 1) * self.k].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.q.iter().sum()
    }

    /// `(q(i,j) + q(j,i)) / (Σ_k q(i,k) + Σ_k q(j,k))`, zero when the
    /// denominator vanishes.
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        let den = self.row_sum(i) + self.row_sum(j);
        if den == 0 {
            0.0
        } else {
            (self.q(i, j) + self.q(j, i)) as f64 / den as f64
        }
    }

    /// Folds row and column `absorbed` into `survivor`.
    pub fn merge_into(&mut self, survivor: usize, absorbed: usize) {
        let k = self.k;
        for x in 0..k {
            self.q[survivor * k + x] += self.q[absorbed * k + x];
            self.q[absorbed * k + x] = 0;
        }
        for x in 0..k {
            self.q[x * k + survivor] += self.q[x * k + absorbed];
            self.q[x * k + absorbed] = 0;
        }
    }
}

/// Co-occurrence of labels among sample points within Chebyshev distance
/// `neighborhood_voxels`. Scans never pair with each other.
pub fn cooccurrence(
    scans: &[Vec<LabeledPoint>],
    k: usize,
    neighborhood_voxels: usize,
) -> Result<CooccurrenceMatrix> {
    let mut q = vec![0u64; k * k];
    for points in scans {
        if let Some(p) = points.iter().find(|p| p.label >= k) {
            return Err(Error::Invalid(format!("label {} out of range for K = {k}", p.label)));
        }
        let mut sorted: Vec<&LabeledPoint> = points.iter().collect();
        sorted.sort_by_key(|p| p.voxel[2]);
        for (a_idx, a) in sorted.iter().enumerate() {
            for b in &sorted[a_idx + 1..] {
                if b.voxel[2] - a.voxel[2] > neighborhood_voxels {
                    break;
                }
                let near = (0..2).all(|ax| a.voxel[ax].abs_diff(b.voxel[ax]) <= neighborhood_voxels);
                if near {
                    let (i, j) = (a.label, b.label);
                    q[i * k + j] += 1;
                    if i != j {
                        q[j * k + i] += 1;
                    }
                }
            }
        }
    }
    CooccurrenceMatrix::from_counts(k, neighborhood_voxels, q)
}

/// One merge event, in benchmark prototype numbering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub iteration: usize,
    pub i: usize,
    pub j: usize,
    pub survivor: usize,
    pub r_f: usize,
    pub r_s: usize,
    pub distance: f64,
    pub similarity: f64,
    pub count_i: usize,
    pub count_j: usize,
}

pub fn write_lineage_csv(path: impl AsRef<Path>, lineage: &[LineageEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "iteration,i,j,survivor,R_f,R_S").expect("write to Vec");
    for e in lineage {
        writeln!(buf, "{},{},{},{},{},{}", e.iteration, e.i, e.j, e.survivor, e.r_f, e.r_s)
            .expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// How q follows a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoocUpdate {
    /// Sum the absorbed row and column into the survivor.
    #[default]
    Summation,
    /// Recount from the relabeled sample points.
    Recompute,
}

/// A training ROI's position: owning scan, voxel center, index into the feature list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiSite {
    pub voxel: [usize; 3],
    pub roi: usize,
}

#[derive(Debug, Clone)]
pub struct MergeConfig {
    pub neighborhood_voxels: usize,
    pub update: CoocUpdate,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            neighborhood_voxels: DEFAULT_NEIGHBORHOOD_VOXELS,
            update: CoocUpdate::Summation,
            seed: 0,
        }
    }
}

/// Competition ranks ("1224"): equal values share the best rank.
fn competition_ranks(values: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| if descending { -values[i] } else { values[i] };
    idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = if pos > 0 && key(idx[pos - 1]) == key(i) {
            ranks[idx[pos - 1]]
        } else {
            pos + 1
        };
    }
    ranks
}

/// Prototype pruning state over the benchmark model's training ROIs.
pub struct Merger<'a> {
    base: PrototypeModel,
    features: &'a [RoiFeature],
    roi_intensity: &'a [f64],
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    members: Vec<Vec<usize>>,
    alive: Vec<bool>,
    cooc: CooccurrenceMatrix,
    scans: Vec<Vec<RoiSite>>,
    distance: Vec<f64>,
    cfg: MergeConfig,
    lineage: Vec<LineageEntry>,
}

impl<'a> Merger<'a> {
    /// `labels[r]` is ROI `r`'s prototype in `model`; `scans` groups ROI
    /// sites by scan for co-occurrence.
    pub fn new(
        model: &PrototypeModel,
        features: &'a [RoiFeature],
        roi_intensity: &'a [f64],
        labels: &[usize],
        scans: Vec<Vec<RoiSite>>,
        cfg: MergeConfig,
    ) -> Result<Self> {
        let k = model.k;
        if features.len() != labels.len() || roi_intensity.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} features, {} intensities, {} labels",
                features.len(),
                roi_intensity.len(),
                labels.len()
            )));
        }
        let mut members = vec![Vec::new(); k];
        for (r, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Invalid(format!("label {l} out of range for K = {k}")));
            }
            members[l].push(r);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::Invalid(format!("prototype {empty} has no members")));
        }
        let mut merger = Self {
            base: model.clone(),
            features,
            roi_intensity,
            labels: labels.to_vec(),
            centroids: model.centroids.clone(),
            members,
            alive: vec![true; k],
            cooc: CooccurrenceMatrix::from_counts(k, cfg.neighborhood_voxels, vec![0; k * k])?,
            scans,
            distance: vec![0.0; k * k],
            cfg,
            lineage: Vec::new(),
        };
        merger.recount_cooccurrence()?;
        for a in 0..k {
            for b in a + 1..k {
                merger.refresh_distance(a, b)?;
            }
        }
        Ok(merger)
    }

    fn recount_cooccurrence(&mut self) -> Result<()> {
        let points: Vec<Vec<LabeledPoint>> = self
            .scans
            .iter()
            .map(|sites| {
                sites
                    .iter()
                    .map(|s| LabeledPoint {
                        voxel: s.voxel,
                        label: self.labels[s.roi],
                    })
                    .collect()
            })
            .collect();
        self.cooc = cooccurrence(&points, self.base.k, self.cfg.neighborhood_voxels)?;
        Ok(())
    }

    fn refresh_distance(&mut self, a: usize, b: usize) -> Result<()> {
        let k = self.base.k;
        let mi: Vec<&[f64]> = self.members[a].iter().map(|&r| self.features[r].values.as_slice()).collect();
        let mj: Vec<&[f64]> = self.members[b].iter().map(|&r| self.features[r].values.as_slice()).collect();
        let tag = ((self.lineage.len() as u64) << 40) | ((a as u64) << 20) | b as u64;
        let d = inter_prototype_distance(&mi, &mj, crate::seed::derive(self.cfg.seed, "merge-pairs", tag))?;
        self.distance[a * k + b] = d;
        self.distance[b * k + a] = d;
        Ok(())
    }

    pub fn live_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn lineage(&self) -> &[LineageEntry] {
        &self.lineage
    }

    pub fn cooccurrence(&self) -> &CooccurrenceMatrix {
        &self.cooc
    }

    /// Member count per benchmark prototype id (zero once absorbed).
    pub fn member_counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Live pairs `(a, b)` with `a < b`, their distances and similarities.
    fn live_pairs(&self) -> Vec<(usize, usize, f64, f64)> {
        let k = self.base.k;
        let live: Vec<usize> = (0..k).filter(|&i| self.alive[i]).collect();
        let mut pairs = Vec::with_capacity(live.len() * live.len() / 2);
        for (x, &a) in live.iter().enumerate() {
            for &b in &live[x + 1..] {
                pairs.push((a, b, self.distance[a * k + b], self.cooc.similarity(a, b)));
            }
        }
        pairs
    }

    /// Index into `live_pairs` of the pair to merge, with its ranks.
    fn select(pairs: &[(usize, usize, f64, f64)]) -> (usize, usize, usize) {
        let dist: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let sim: Vec<f64> = pairs.iter().map(|p| p.3).collect();
        let rf = competition_ranks(&dist, false);
        let rs = competition_ranks(&sim, true);
        // pairs are already in lexicographic order, so the first minimum wins ties
        let best = (0..pairs.len())
            .min_by_key(|&p| (rf[p] + rs[p], rf[p], p))
            .expect("at least one pair");
        (best, rf[best], rs[best])
    }

    /// Merges the best-ranked pair; the lower id survives.
    pub fn step(&mut self) -> Result<LineageEntry> {
        if self.live_count() < 2 {
            return Err(Error::TooFew {
                what: "live prototypes to merge",
                needed: 2,
                got: self.live_count(),
            });
        }
        let pairs = self.live_pairs();
        let (best, r_f, r_s) = Self::select(&pairs);
        let (a, b, distance, similarity) = pairs[best];
        let (na, nb) = (self.members[a].len(), self.members[b].len());
        let (wa, wb) = (na as f64 / (na + nb) as f64, nb as f64 / (na + nb) as f64);
        let merged: Vec<f64> = self.centroids[a]
            .iter()
            .zip(&self.centroids[b])
            .map(|(x, y)| wa * x + wb * y)
            .collect();
        self.centroids[a] = merged;
        let moved = std::mem::take(&mut self.members[b]);
        for &r in &moved {
            self.labels[r] = a;
        }
        self.members[a].extend(moved);
        self.members[a].sort_unstable();
        self.alive[b] = false;
        match self.cfg.update {
            CoocUpdate::Summation => self.cooc.merge_into(a, b),
            CoocUpdate::Recompute => self.recount_cooccurrence()?,
        }
        let entry = LineageEntry {
            iteration: self.lineage.len() + 1,
            i: a,
            j: b,
            survivor: a,
            r_f,
            r_s,
            distance,
            similarity,
            count_i: na,
            count_j: nb,
        };
        self.lineage.push(entry.clone());
        let k = self.base.k;
        let others: Vec<usize> = (0..k).filter(|&o| self.alive[o] && o != a).collect();
        for other in others {
            let (x, y) = if other < a { (other, a) } else { (a, other) };
            self.refresh_distance(x, y)?;
        }
        Ok(entry)
    }

    /// Current state as a standalone model plus per-ROI labels in its numbering.
    pub fn snapshot(&self) -> (PrototypeModel, Vec<usize>) {
        let live: Vec<usize> = (0..self.base.k).filter(|&i| self.alive[i]).collect();
        let mut dense = vec![usize::MAX; self.base.k];
        for (d, &s) in live.iter().enumerate() {
            dense[s] = d;
        }
        let compact: Vec<usize> = self.labels.iter().map(|&l| dense[l]).collect();
        let (order, mean_intensity, member_counts) =
            intensity_order(&compact, self.roi_intensity, live.len());
        let mut rank = vec![0; live.len()];
        for (r, &c) in order.iter().enumerate() {
            rank[c] = r;
        }
        let model = PrototypeModel {
            k: live.len(),
            feature_kind: self.base.feature_kind,
            centroids: order.iter().map(|&c| self.centroids[live[c]].clone()).collect(),
            order: order.clone(),
            mean_intensity,
            member_counts,
            source_ids: order.iter().map(|&c| self.base.source_ids[live[c]]).collect(),
            lineage: self.lineage.clone(),
            seed: self.base.seed,
            feature: self.base.feature.clone(),
        };
        let labels = compact.iter().map(|&c| rank[c]).collect();
        (model, labels)
    }

    /// Merges down to `target_k`, returning a snapshot at each checkpoint
    /// (and at `target_k`), largest K first.
    pub fn merge_to(
        &mut self,
        target_k: usize,
        checkpoints: &[usize],
    ) -> Result<Vec<(PrototypeModel, Vec<usize>)>> {
        if target_k == 0 || target_k > self.live_count() {
            return Err(Error::config(
                "target_k",
                format!("must lie in 1..={}, got {target_k}", self.live_count()),
            ));
        }
        let mut wanted: Vec<usize> = checkpoints
            .iter()
            .copied()
            .filter(|&c| c >= target_k && c <= self.live_count())
            .chain(std::iter::once(target_k))
            .collect();
        wanted.sort_unstable_by(|a, b| b.cmp(a));
        wanted.dedup();
        let mut out = Vec::with_capacity(wanted.len());
        for c in wanted {
            while self.live_count() > c {
                self.step()?;
            }
            out.push(self.snapshot());
        }
        Ok(out)
    }
}
