//! DOG2: soft histograms of intensity and of three difference-of-Gaussian octaves.

use serde::{Deserialize, Serialize};

use super::{FeatureKind, RoiFeature};
use crate::error::{Error, Result};
use crate::preprocess::RoiPatch;

pub const DOG_OCTAVES: usize = 3;
pub const DOG_BINS: usize = 10;
/// Finest Gaussian scale in voxels.
pub const BASE_SIGMA: f64 = 1.0;

/// Per-octave response range used for binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dog2Calibration {
    pub ranges: [(f64, f64); DOG_OCTAVES],
}

impl Dog2Calibration {
    pub fn new(ranges: [(f64, f64); DOG_OCTAVES]) -> Result<Self> {
        for (o, &(lo, hi)) in ranges.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Invalid(format!(
                    "octave {} range ({lo}, {hi}) is not increasing",
                    o + 1
                )));
            }
        }
        Ok(Self { ranges })
    }
}

/// Normalized Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Symmetric reflection (`d c b a | a b c d`) for any offset.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian smoothing inside the window; unit-extent axes are skipped.
pub fn smooth(values: &[f64], window: [usize; 3], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let strides = [1, window[0], window[0] * window[1]];
    let mut cur = values.to_vec();
    let mut next = vec![0.0; values.len()];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = window[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        for start in 0..values.len() {
            // visit each line once, from its first element
            if (start / stride) % n != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| cur[start + i * stride]));
            for i in 0..n {
                let mut acc = 0.0;
                for (t, &w) in kernel.iter().enumerate() {
                    acc += w * line[reflect(i as isize + t as isize - radius, n)];
                }
                next[start + i * stride] = acc;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Per-voxel responses `G(2^o σ₀) − G(2^(o−1) σ₀)` for `o = 1..=3`.
///
/// The ROI mean is removed first, so a constant ROI responds with exact zeros.
pub fn dog_responses(roi: &RoiPatch) -> [Vec<f64>; DOG_OCTAVES] {
    let mean = roi.mean();
    let centered: Vec<f64> = roi.values.iter().map(|v| v - mean).collect();
    let blurred: Vec<Vec<f64>> = (0..=DOG_OCTAVES)
        .map(|s| smooth(&centered, roi.window, BASE_SIGMA * (1u32 << s) as f64))
        .collect();
    std::array::from_fn(|o| {
        blurred[o + 1]
            .iter()
            .zip(&blurred[o])
            .map(|(coarse, fine)| coarse - fine)
            .collect()
    })
}

/// Adds each value to `DOG_BINS` bins on `[lo, hi]` by linear interpolation
/// between the two nearest bin centers; values beyond the outer centers
/// land entirely in the edge bin. The result sums to one.
pub fn soft_histogram(values: &[f64], lo: f64, hi: f64, out: &mut [f64]) {
    let bins = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let t = (v - lo) / width - 0.5;
        if t <= 0.0 {
            out[0] += 1.0;
        } else if t >= (bins - 1) as f64 {
            out[bins - 1] += 1.0;
        } else {
            let b = t.floor() as usize;
            let frac = t - b as f64;
            out[b] += 1.0 - frac;
            out[b + 1] += frac;
        }
    }
    let n = values.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
}

/// Cap on pooled responses per octave during calibration.
const CALIBRATION_SAMPLES: usize = 1_000_000;

/// `[1st, 99th]` percentile of pooled training responses per octave.
pub fn calibrate_dog2(rois: &[&RoiPatch]) -> Result<Dog2Calibration> {
    if rois.is_empty() {
        return Err(Error::TooFew {
            what: "training ROIs for DoG calibration",
            needed: 1,
            got: 0,
        });
    }
    let total: usize = rois.iter().map(|r| r.values.len()).sum();
    let stride = total.div_ceil(CALIBRATION_SAMPLES).max(1);
    let mut pooled: [Vec<f64>; DOG_OCTAVES] = Default::default();
    let mut counter = 0usize;
    for roi in rois {
        let resp = dog_responses(roi);
        for i in 0..roi.values.len() {
            if counter % stride == 0 {
                for o in 0..DOG_OCTAVES {
                    pooled[o].push(resp[o][i]);
                }
            }
            counter += 1;
        }
    }
    let ranges = std::array::from_fn(|o| {
        let v = &mut pooled[o];
        let lo = percentile(v, 0.01);
        let hi = percentile(v, 0.99);
        if hi > lo {
            (lo, hi)
        } else {
            let pad = lo.abs().max(1.0) * 1e-6;
            (lo - pad, hi + pad)
        }
    });
    Dog2Calibration::new(ranges)
}

fn percentile(v: &mut [f64], q: f64) -> f64 {
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    *v.select_nth_unstable_by(idx, f64::total_cmp).1
}

/// Four 10-bin blocks (intensity, DoG octaves 1..3), each normalized, then
/// scaled by 1/4 so the 40-vector sums to one.
pub fn dog2_feature(roi: &RoiPatch, cal: &Dog2Calibration) -> Result<RoiFeature> {
    if roi.values.is_empty() {
        return Err(Error::Invalid("empty ROI".into()));
    }
    let mut values = vec![0.0; 4 * DOG_BINS];
    soft_histogram(&roi.values, 0.0, 1.0, &mut values[..DOG_BINS]);
    let resp = dog_responses(roi);
    for (o, r) in resp.iter().enumerate() {
        let (lo, hi) = cal.ranges[o];
        soft_histogram(r, lo, hi, &mut values[(o + 1) * DOG_BINS..(o + 2) * DOG_BINS]);
    }
    values.iter_mut().for_each(|v| *v *= 0.25);
    RoiFeature::new(FeatureKind::Dog2, values)
}
