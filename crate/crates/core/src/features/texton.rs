use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{FeatureKind, RoiFeature, FEATURE_LEN};
use crate::clustering::{kmeans, KMeansConfig};
use crate::error::{Error, Result};
use crate::preprocess::RoiPatch;

pub const TEXTON_COUNT: usize = FEATURE_LEN;
pub const PATCH_EDGE: usize = 3;

/// 40 small-patch centroids acting as visual words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextonCodebook {
    pub patch_len: usize,
    pub textons: Vec<Vec<f64>>,
}

impl TextonCodebook {
    pub fn new(textons: Vec<Vec<f64>>) -> Result<Self> {
        if textons.len() != TEXTON_COUNT {
            return Err(Error::DimensionMismatch(format!(
                "codebook needs {TEXTON_COUNT} textons, got {}",
                textons.len()
            )));
        }
        let patch_len = textons[0].len();
        if patch_len != patch_len_for(true) && patch_len != patch_len_for(false) {
            return Err(Error::DimensionMismatch(format!(
                "texton length {patch_len} is neither 9 nor 27"
            )));
        }
        if textons.iter().any(|t| t.len() != patch_len) {
            return Err(Error::DimensionMismatch("ragged texton lengths".into()));
        }
        Ok(Self { patch_len, textons })
    }

    fn flat(&self) -> Vec<f64> {
        self.textons.iter().flatten().copied().collect()
    }
}

const fn patch_len_for(planar: bool) -> usize {
    if planar {
        PATCH_EDGE * PATCH_EDGE
    } else {
        PATCH_EDGE * PATCH_EDGE * PATCH_EDGE
    }
}

/// Patch vector length for a ROI: 9 for planar ROIs, 27 otherwise.
pub fn patch_len(roi: &RoiPatch) -> usize {
    patch_len_for(roi.is_planar())
}

fn patch_grid(roi: &RoiPatch) -> Result<[usize; 3]> {
    let w = roi.window;
    let too_small = w[0] < PATCH_EDGE || w[1] < PATCH_EDGE || (!roi.is_planar() && w[2] < PATCH_EDGE);
    if too_small {
        return Err(Error::Invalid(format!(
            "ROI window {w:?} is smaller than a {PATCH_EDGE}-voxel patch"
        )));
    }
    let pz = if roi.is_planar() { 1 } else { w[2] - PATCH_EDGE + 1 };
    Ok([w[0] - PATCH_EDGE + 1, w[1] - PATCH_EDGE + 1, pz])
}

/// Number of stride-1 patches inside the ROI.
pub fn patch_count(roi: &RoiPatch) -> Result<usize> {
    Ok(patch_grid(roi)?.iter().product())
}

/// Copies the patch with lowest corner `(x, y, z)` into `out`, x-fastest.
#[inline]
fn gather(roi: &RoiPatch, x: usize, y: usize, z: usize, out: &mut [f64]) {
    let depth = if roi.is_planar() { 1 } else { PATCH_EDGE };
    let mut k = 0;
    for dz in 0..depth {
        for dy in 0..PATCH_EDGE {
            let row = x + roi.window[0] * (y + dy + roi.window[1] * (z + dz));
            out[k..k + PATCH_EDGE].copy_from_slice(&roi.values[row..row + PATCH_EDGE]);
            k += PATCH_EDGE;
        }
    }
}

fn for_each_patch(roi: &RoiPatch, mut f: impl FnMut(&[f64])) -> Result<()> {
    let grid = patch_grid(roi)?;
    let mut buf = vec![0.0; patch_len(roi)];
    for z in 0..grid[2] {
        for y in 0..grid[1] {
            for x in 0..grid[0] {
                gather(roi, x, y, z, &mut buf);
                f(&buf);
            }
        }
    }
    Ok(())
}

/// Draws up to `max` patches uniformly (without replacement) from all
/// stride-1 patch positions of the given ROIs. Returns `(flat, patch_len)`.
pub fn sample_patch_pool(rois: &[&RoiPatch], max: usize, seed: u64) -> Result<(Vec<f64>, usize)> {
    let first = rois.first().ok_or(Error::TooFew {
        what: "training ROIs",
        needed: 1,
        got: 0,
    })?;
    let len = patch_len(first);
    if rois.iter().any(|r| patch_len(r) != len) {
        return Err(Error::Invalid("mixed 2D and 3D ROIs in one pool".into()));
    }
    let mut offsets = Vec::with_capacity(rois.len() + 1);
    offsets.push(0usize);
    for r in rois {
        offsets.push(offsets.last().unwrap() + patch_count(r)?);
    }
    let total = *offsets.last().unwrap();
    let mut picks: Vec<usize> = if total <= max {
        (0..total).collect()
    } else {
        index::sample(&mut crate::seed::rng(seed), total, max).into_vec()
    };
    picks.sort_unstable();

    let mut pool = vec![0.0; picks.len() * len];
    let mut roi_idx = 0;
    for (slot, &p) in pool.chunks_exact_mut(len).zip(&picks) {
        while offsets[roi_idx + 1] <= p {
            roi_idx += 1;
        }
        let roi = rois[roi_idx];
        let grid = patch_grid(roi)?;
        let local = p - offsets[roi_idx];
        let (x, rest) = (local % grid[0], local / grid[0]);
        gather(roi, x, rest % grid[1], rest / grid[1], slot);
    }
    Ok((pool, len))
}

/// K-means (k = 40) over patch vectors.
pub fn train_texton_codebook(patches: &[Vec<f64>], seed: u64) -> Result<TextonCodebook> {
    let len = patches.first().map_or(0, Vec::len);
    if patches.iter().any(|p| p.len() != len) {
        return Err(Error::DimensionMismatch("ragged patch vectors".into()));
    }
    let flat: Vec<f64> = patches.iter().flatten().copied().collect();
    train_texton_codebook_flat(&flat, len, seed)
}

pub fn train_texton_codebook_flat(patches: &[f64], patch_len: usize, seed: u64) -> Result<TextonCodebook> {
    if patch_len == 0 {
        return Err(Error::TooFew {
            what: "distinct patches",
            needed: TEXTON_COUNT,
            got: 0,
        });
    }
    let mut distinct: HashSet<Vec<u64>> = HashSet::new();
    for p in patches.chunks_exact(patch_len) {
        distinct.insert(p.iter().map(|v| v.to_bits()).collect());
        if distinct.len() >= TEXTON_COUNT {
            break;
        }
    }
    if distinct.len() < TEXTON_COUNT {
        return Err(Error::TooFew {
            what: "distinct patches",
            needed: TEXTON_COUNT,
            got: distinct.len(),
        });
    }
    let km = kmeans(patches, patch_len, &KMeansConfig::new(TEXTON_COUNT, seed))?;
    TextonCodebook::new((0..TEXTON_COUNT).map(|i| km.centroid(i).to_vec()).collect())
}

/// Nearest texton with early exit on partial sums; ties go to the lower index.
#[inline]
fn nearest_texton(patch: &[f64], textons: &[f64], len: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    'outer: for (i, t) in textons.chunks_exact(len).enumerate() {
        let mut d = 0.0;
        for (a, b) in patch.iter().zip(t) {
            d += (a - b) * (a - b);
            if d >= best_d {
                continue 'outer;
            }
        }
        best = i;
        best_d = d;
    }
    best
}

/// Raw texton counts over every stride-1 patch in the ROI.
pub fn texton_counts(roi: &RoiPatch, cb: &TextonCodebook) -> Result<Vec<u64>> {
    if patch_len(roi) != cb.patch_len {
        return Err(Error::DimensionMismatch(format!(
            "ROI patches have length {}, codebook expects {}",
            patch_len(roi),
            cb.patch_len
        )));
    }
    let flat = cb.flat();
    let mut counts = vec![0u64; TEXTON_COUNT];
    for_each_patch(roi, |p| counts[nearest_texton(p, &flat, cb.patch_len)] += 1)?;
    Ok(counts)
}

/// Normalized texton frequency histogram of a ROI.
pub fn texton_feature(roi: &RoiPatch, cb: &TextonCodebook) -> Result<RoiFeature> {
    let counts = texton_counts(roi, cb)?;
    let n: u64 = counts.iter().sum();
    RoiFeature::new(
        FeatureKind::Texton,
        counts.iter().map(|&c| c as f64 / n as f64).collect(),
    )
}
