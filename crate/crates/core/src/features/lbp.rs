//! LBP2: joint histogram of rotation-invariant uniform LBP codes (R = 1, P = 8)
//! and center-voxel intensity.

use super::{FeatureKind, RoiFeature, FEATURE_LEN};
use crate::error::{Error, Result};
use crate::preprocess::RoiPatch;

/// Nine uniform codes (0..=8 set bits) plus one bucket for everything else.
pub const LBP_CODES: usize = 10;
pub const INTENSITY_BINS: usize = 4;

const NON_UNIFORM: u8 = 9;

/// Circular neighbor order in a row-major 3×3 window, clockwise from top-left:
///
/// ```text
/// 0 1 2
/// 7 c 3
/// 6 5 4
/// ```
const RING: [usize; 8] = [0, 1, 2, 5, 8, 7, 6, 3];

const fn build_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut p = 0usize;
    while p < 256 {
        let pattern = p as u8;
        let mut min = pattern;
        let mut r = 1;
        while r < 8 {
            let rot = pattern.rotate_right(r);
            if rot < min {
                min = rot;
            }
            r += 1;
        }
        let transitions = (min ^ min.rotate_right(1)).count_ones();
        table[p] = if transitions <= 2 {
            min.count_ones() as u8
        } else {
            NON_UNIFORM
        };
        p += 1;
    }
    table
}

static CODE_TABLE: [u8; 256] = build_table();

/// Code in `0..=9` for a raw 8-bit pattern.
#[inline]
pub fn code_of_pattern(pattern: u8) -> u8 {
    CODE_TABLE[pattern as usize]
}

/// Raw pattern: bit `p` is set when neighbor `p` is at least the center.
#[inline]
pub fn lbp_pattern(window: &[f64; 9]) -> u8 {
    let center = window[4];
    RING.iter()
        .enumerate()
        .fold(0u8, |acc, (bit, &i)| acc | (u8::from(window[i] >= center) << bit))
}

/// Rotation-invariant uniform code of a row-major 3×3 window.
#[inline]
pub fn lbp_code(window: &[f64; 9]) -> u8 {
    code_of_pattern(lbp_pattern(window))
}

/// Joint (code, center intensity) histogram over every interior voxel of
/// every axial slice, flattened code-major.
pub fn lbp2_feature(roi: &RoiPatch) -> Result<RoiFeature> {
    let [nx, ny, nz] = roi.window;
    if nx < 3 || ny < 3 {
        return Err(Error::Invalid(format!(
            "ROI window {:?} too small for a 3x3 LBP neighborhood",
            roi.window
        )));
    }
    let mut counts = [0u64; FEATURE_LEN];
    let mut w = [0.0; 9];
    for z in 0..nz {
        for y in 1..ny - 1 {
            for x in 1..nx - 1 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        w[dy * 3 + dx] = roi.at(x + dx - 1, y + dy - 1, z);
                    }
                }
                let code = lbp_code(&w) as usize;
                let bin = ((w[4] * INTENSITY_BINS as f64) as usize).min(INTENSITY_BINS - 1);
                counts[code * INTENSITY_BINS + bin] += 1;
            }
        }
    }
    let n: u64 = counts.iter().sum();
    RoiFeature::new(
        FeatureKind::Lbp2,
        counts.iter().map(|&c| c as f64 / n as f64).collect(),
    )
}
