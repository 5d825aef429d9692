//! Intensity rescaling and ROI sampling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{coords, Mask, Volume};

pub const LINEAR_LO_HU: f64 = -1024.0;
pub const LINEAR_HI_HU: f64 = -400.0;
pub const SIGMOID_CENTER_HU: f64 = -950.0;
pub const SIGMOID_WIDTH_HU: f64 = 25.0;

/// Monotone map from HU to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IntensityMap {
    /// Clamp, then map `[-1024, -400]` HU linearly onto `[0, 1]`.
    Linear,
    /// Logistic curve; steepest at `center_hu`.
    Sigmoid { center_hu: f64, width_hu: f64 },
}

impl IntensityMap {
    pub fn sigmoid() -> Self {
        IntensityMap::Sigmoid {
            center_hu: SIGMOID_CENTER_HU,
            width_hu: SIGMOID_WIDTH_HU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let IntensityMap::Sigmoid {
            center_hu,
            width_hu,
        } = *self
        {
            if !center_hu.is_finite() {
                return Err(Error::config("center_hu", "must be finite"));
            }
            if !(width_hu > 0.0 && width_hu.is_finite()) {
                return Err(Error::config("width_hu", "must be positive"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, hu: f64) -> f64 {
        map_intensity(hu, self)
    }
}

#[inline]
pub fn map_intensity(hu: f64, map: &IntensityMap) -> f64 {
    match *map {
        IntensityMap::Linear => {
            ((hu - LINEAR_LO_HU) / (LINEAR_HI_HU - LINEAR_LO_HU)).clamp(0.0, 1.0)
        }
        IntensityMap::Sigmoid {
            center_hu,
            width_hu,
        } => {
            let y = 1.0 / (1.0 + (-(hu - center_hu) / width_hu).exp());
            // exp overflow yields 0 already; NaN only for NaN input.
            y.clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiMode {
    Cube3d,
    Square2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSpec {
    pub roi_mode: RoiMode,
    pub roi_edge_mm: f64,
    /// Lung volume (mm³) per requested sample.
    pub density_mm3: f64,
    /// Candidate budget as a multiple of the target count.
    pub alpha: f64,
    pub min_lung_fraction: f64,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            roi_mode: RoiMode::Cube3d,
            roi_edge_mm: 25.0,
            density_mm3: 3300.0,
            alpha: 5.0,
            min_lung_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.roi_edge_mm > 0.0 && self.roi_edge_mm.is_finite()) {
            return Err(Error::config("roi_edge_mm", "must be positive"));
        }
        if !(self.density_mm3 > 0.0 && self.density_mm3.is_finite()) {
            return Err(Error::config("density_mm3", "must be positive"));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be at least 1"));
        }
        if !(self.min_lung_fraction > 0.0 && self.min_lung_fraction <= 1.0) {
            return Err(Error::config("min_lung_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// ROI window extent in voxels along each axis for this grid spacing.
    pub fn window(&self, spacing_mm: [f64; 3]) -> [usize; 3] {
        let edge = |s: f64| ((self.roi_edge_mm / s).round() as usize).max(1);
        match self.roi_mode {
            RoiMode::Cube3d => [edge(spacing_mm[0]), edge(spacing_mm[1]), edge(spacing_mm[2])],
            RoiMode::Square2d => [edge(spacing_mm[0]), edge(spacing_mm[1]), 1],
        }
    }
}

/// A sampled neighborhood with mapped intensities, x-fastest inside the window.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPatch {
    pub center: [usize; 3],
    /// Lowest corner of the window in the volume grid.
    pub origin: [usize; 3],
    pub window: [usize; 3],
    pub values: Vec<f64>,
    pub lung_fraction: f64,
}

impl RoiPatch {
    pub fn from_values(window: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if values.len() != window.iter().product::<usize>() {
            return Err(Error::DimensionMismatch(format!(
                "window {window:?} needs {} values, got {}",
                window.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(Self {
            center: [window[0] / 2, window[1] / 2, window[2] / 2],
            origin: [0; 3],
            window,
            values,
            lung_fraction: 1.0,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[x + self.window[0] * (y + self.window[1] * z)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_planar(&self) -> bool {
        self.window[2] == 1
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub patches: Vec<RoiPatch>,
    /// Requested sample count `floor(lung_mm³ / density)`.
    pub target: usize,
    pub candidates_drawn: usize,
    /// Candidate budget ran out before `target` survivors were found.
    pub exhausted: bool,
}

/// Window placement for a center, or `None` when it leaves the grid.
fn place_window(center: [usize; 3], window: [usize; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut origin = [0; 3];
    for a in 0..3 {
        let half = window[a] / 2;
        if center[a] < half || center[a] - half + window[a] > dims[a] {
            return None;
        }
        origin[a] = center[a] - half;
    }
    Some(origin)
}

fn window_lung_fraction(mask: &Mask, origin: [usize; 3], window: [usize; 3]) -> f64 {
    let mut lung = 0usize;
    for z in origin[2]..origin[2] + window[2] {
        for y in origin[1]..origin[1] + window[1] {
            let row = mask.index(origin[0], y, z);
            lung += mask.data()[row..row + window[0]]
                .iter()
                .filter(|&&v| v == 1)
                .count();
        }
    }
    lung as f64 / window.iter().product::<usize>() as f64
}

fn extract(vol: &Volume, map: &IntensityMap, origin: [usize; 3], window: [usize; 3]) -> Vec<f64> {
    let mut values = Vec::with_capacity(window.iter().product());
    for z in origin[2]..origin[2] + window[2] {
        for y in origin[1]..origin[1] + window[1] {
            let row = vol.index(origin[0], y, z);
            values.extend(
                vol.data()[row..row + window[0]]
                    .iter()
                    .map(|&hu| map.apply(hu)),
            );
        }
    }
    values
}

/// Draws lung-centered ROIs uniformly at random, discarding windows that leave
/// the grid or hold too little lung.
pub fn sample_rois(
    vol: &Volume,
    mask: &Mask,
    spec: &SampleSpec,
    map: &IntensityMap,
) -> Result<SampleOutcome> {
    spec.validate()?;
    map.validate()?;
    mask.check_pairing(vol)?;
    let lung: Vec<usize> = (0..mask.data().len()).filter(|&i| mask.is_lung(i)).collect();
    if lung.is_empty() {
        return Err(Error::EmptyMask);
    }
    let dims = vol.dims();
    let lung_mm3 = lung.len() as f64 * vol.voxel_volume_mm3();
    let target = (lung_mm3 / spec.density_mm3).floor() as usize;
    let budget = (spec.alpha * target as f64).ceil() as usize;
    let window = spec.window(vol.spacing_mm());

    let mut rng = crate::seed::rng(spec.seed);
    let mut kept = Vec::with_capacity(target);
    let mut drawn = 0;
    while kept.len() < target && drawn < budget {
        drawn += 1;
        let center = coords(dims, lung[rng.random_range(0..lung.len())]);
        let Some(origin) = place_window(center, window, dims) else {
            continue;
        };
        let fraction = window_lung_fraction(mask, origin, window);
        if fraction >= spec.min_lung_fraction {
            kept.push((center, origin, fraction));
        }
    }
    let exhausted = kept.len() < target;
    if exhausted {
        log::warn!(
            "candidate budget exhausted: {} of {target} ROIs after {drawn} draws",
            kept.len()
        );
    }
    let patches = kept
        .into_par_iter()
        .map(|(center, origin, lung_fraction)| RoiPatch {
            center,
            origin,
            window,
            values: extract(vol, map, origin, window),
            lung_fraction,
        })
        .collect();
    Ok(SampleOutcome {
        patches,
        target,
        candidates_drawn: drawn,
        exhausted,
    })
}
