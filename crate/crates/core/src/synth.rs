//! Synthetic phantoms: axial slabs of planted textures with known class mixtures.
//!
//! Each scan stacks one contiguous slab per generator along z. Slab thickness
//! follows the scan's mixture weights (largest-remainder rounding over the lung
//! slices), and the emitted label is recounted from the generator map, so it
//! is exact for what was generated rather than what was requested.

use std::path::Path;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::smooth;
use crate::volume::{
    linear_index, voxel_count, write_labels, write_mask, write_u8_map, write_volume, Dtype,
    GlobalLabel, Manifest, Mask, ScanEntry, TissueClass, Volume,
};

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = -400.0;
/// Mask border excluded on every side.
pub const MASK_BORDER: usize = 2;
/// Correlation length of the `diffuse_low` field, in voxels.
const DIFFUSE_SIGMA_VOXELS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Independent Gaussian voxels.
    GaussianNoise { mean_hu: f64, sd_hu: f64 },
    /// Noisy background pierced by spherical low-attenuation holes.
    BlobbyLowAttenuation {
        /// Holes per cm³ of slab.
        hole_density: f64,
        hole_radius_mm: f64,
        background_hu: f64,
        hole_hu: f64,
        #[serde(default = "default_noise_sd")]
        noise_sd_hu: f64,
    },
    /// Spatially correlated low-attenuation noise.
    DiffuseLow { mean_hu: f64, sd_hu: f64 },
    /// Low-attenuation band along the in-plane mask border.
    PleuralBand {
        band_width_mm: f64,
        hole_hu: f64,
        background_hu: f64,
        #[serde(default = "default_noise_sd")]
        noise_sd_hu: f64,
    },
}

fn default_noise_sd() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureGenerator {
    pub id: usize,
    pub class: TissueClass,
    #[serde(flatten)]
    pub kind: GeneratorKind,
}

impl TextureGenerator {
    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::config("generators", format!("generator {}: {reason}", self.id));
        let hu_ok = |v: f64| (HU_MIN..=HU_MAX).contains(&v);
        match self.kind {
            GeneratorKind::GaussianNoise { mean_hu, sd_hu } | GeneratorKind::DiffuseLow { mean_hu, sd_hu } => {
                if !hu_ok(mean_hu) || !(sd_hu >= 0.0) {
                    return Err(bad("mean outside [-1024, -400] or negative sd"));
                }
            }
            GeneratorKind::BlobbyLowAttenuation {
                hole_density,
                hole_radius_mm,
                background_hu,
                hole_hu,
                noise_sd_hu,
            } => {
                if !(hole_density >= 0.0) || !(hole_radius_mm > 0.0) || !(noise_sd_hu >= 0.0) {
                    return Err(bad("hole density, radius and noise must be non-negative"));
                }
                if !hu_ok(background_hu) || !hu_ok(hole_hu) {
                    return Err(bad("HU outside [-1024, -400]"));
                }
            }
            GeneratorKind::PleuralBand {
                band_width_mm,
                hole_hu,
                background_hu,
                noise_sd_hu,
            } => {
                if !(band_width_mm > 0.0) || !(noise_sd_hu >= 0.0) {
                    return Err(bad("band width must be positive"));
                }
                if !hu_ok(background_hu) || !hu_ok(hole_hu) {
                    return Err(bad("HU outside [-1024, -400]"));
                }
            }
        }
        Ok(())
    }
}

/// Six generators: one per emphysema class plus three normal textures at
/// different mean HU.
pub fn default_generators() -> Vec<TextureGenerator> {
    use GeneratorKind::*;
    let kinds = [
        (
            TissueClass::Cle,
            BlobbyLowAttenuation {
                hole_density: 8.0,
                hole_radius_mm: 1.4,
                background_hu: -840.0,
                hole_hu: -990.0,
                noise_sd_hu: 30.0,
            },
        ),
        (TissueClass::Ple, DiffuseLow { mean_hu: -925.0, sd_hu: 25.0 }),
        (
            TissueClass::Pse,
            PleuralBand {
                band_width_mm: 5.0,
                hole_hu: -985.0,
                background_hu: -800.0,
                noise_sd_hu: 30.0,
            },
        ),
        (TissueClass::Ne, GaussianNoise { mean_hu: -865.0, sd_hu: 35.0 }),
        (TissueClass::Ne, GaussianNoise { mean_hu: -760.0, sd_hu: 35.0 }),
        (TissueClass::Ne, GaussianNoise { mean_hu: -690.0, sd_hu: 50.0 }),
    ];
    kinds
        .into_iter()
        .enumerate()
        .map(|(id, (class, kind))| TextureGenerator { id, class, kind })
        .collect()
}

/// Mixture weights from normalized exponential draws (a flat Dirichlet).
pub fn random_weights(n_scans: usize, n_generators: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = crate::seed::rng(crate::seed::derive(seed, "phantom-weights", 0));
    (0..n_scans)
        .map(|_| {
            let raw: Vec<f64> = (0..n_generators).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_scans: usize,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub generators: Vec<TextureGenerator>,
    /// One simplex row per scan, one column per generator.
    pub weights: Vec<Vec<f64>>,
    /// Per-scan, per-generator HU offset drawn from `[-hu_jitter, hu_jitter]`.
    #[serde(default)]
    pub hu_jitter: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// 40 scans of 96³ voxels at 0.7 mm with [`default_generators`].
    pub fn default_suite(seed: u64) -> Self {
        Self::with_generators(40, [96, 96, 96], 0.7, default_generators(), seed)
    }

    pub fn with_generators(
        n_scans: usize,
        dims: [usize; 3],
        spacing: f64,
        generators: Vec<TextureGenerator>,
        seed: u64,
    ) -> Self {
        let weights = random_weights(n_scans, generators.len(), seed);
        Self {
            n_scans,
            dims,
            spacing_mm: [spacing; 3],
            generators,
            weights,
            hu_jitter: 0.0,
            seed,
        }
    }

    /// Resizes the weight table after `n_scans` changes.
    pub fn regenerate_weights(&mut self) {
        self.weights = random_weights(self.n_scans, self.generators.len(), self.seed);
    }

    pub fn lung_slices(&self) -> usize {
        self.dims[2].saturating_sub(2 * MASK_BORDER)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scans == 0 {
            return Err(Error::config("n_scans", "must be positive"));
        }
        if self.dims.iter().any(|&d| d <= 2 * MASK_BORDER) {
            return Err(Error::config(
                "dims",
                format!("every dimension must exceed {}, got {:?}", 2 * MASK_BORDER, self.dims),
            ));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config("spacing_mm", "must be positive"));
        }
        if self.generators.is_empty() || self.generators.len() > usize::from(u8::MAX) {
            return Err(Error::config("generators", "need between 1 and 255 generators"));
        }
        for (i, g) in self.generators.iter().enumerate() {
            if g.id != i {
                return Err(Error::config("generators", format!("generator at position {i} has id {}", g.id)));
            }
            g.validate()?;
        }
        if !(self.hu_jitter >= 0.0) {
            return Err(Error::config("hu_jitter", "must be non-negative"));
        }
        if self.weights.len() != self.n_scans {
            return Err(Error::config(
                "weights",
                format!("{} rows for {} scans", self.weights.len(), self.n_scans),
            ));
        }
        for (s, row) in self.weights.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != self.generators.len()
                || row.iter().any(|w| !(*w >= 0.0))
                || (sum - 1.0).abs() > 1e-6
            {
                return Err(Error::config("weights", format!("row {s} is not a simplex point over the generators")));
            }
            let used = row.iter().filter(|&&w| w > 0.0).count();
            if used > self.lung_slices() {
                return Err(Error::config(
                    "dims",
                    format!("{} lung slices cannot hold {used} slabs", self.lung_slices()),
                ));
            }
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` slices; ties favour lower indices.
pub fn slab_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut by_remainder: Vec<usize> = (0..weights.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &g in by_remainder.iter().take(total.saturating_sub(assigned)) {
        counts[g] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScan {
    pub scan_id: String,
    pub volume: Volume,
    pub mask: Mask,
    pub label: GlobalLabel,
    /// Generator id of every voxel, x-fastest.
    pub generator_map: Vec<u8>,
    pub slab_counts: Vec<usize>,
}

pub fn scan_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// Class fractions over lung voxels, counted from a generator map.
pub fn label_from_map(map: &[u8], mask: &Mask, generators: &[TextureGenerator]) -> Result<GlobalLabel> {
    let mut per_class = [0usize; 4];
    let mut lung = 0usize;
    for (i, &g) in map.iter().enumerate() {
        if mask.is_lung(i) {
            let gen = generators
                .get(usize::from(g))
                .ok_or_else(|| Error::Invalid(format!("generator id {g} out of range")))?;
            per_class[gen.class.index()] += 1;
            lung += 1;
        }
    }
    if lung == 0 {
        return Err(Error::EmptyMask);
    }
    GlobalLabel::from_array(per_class.map(|c| c as f64 / lung as f64))
}

fn border_mask(dims: [usize; 3]) -> Result<Mask> {
    let inside = |v: usize, n: usize| v >= MASK_BORDER && v + MASK_BORDER < n;
    let mut data = vec![0u8; voxel_count(dims)];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if inside(x, dims[0]) && inside(y, dims[1]) && inside(z, dims[2]) {
                    data[linear_index(dims, [x, y, z])] = 1;
                }
            }
        }
    }
    Mask::new(dims, data)
}

fn generate_scan(spec: &PhantomSpec, index: usize) -> Result<PhantomScan> {
    let dims = spec.dims;
    let [nx, ny, nz] = dims;
    let n = voxel_count(dims);
    let mut rng = crate::seed::rng(crate::seed::derive(spec.seed, "phantom-scan", index as u64));

    let counts = slab_counts(&spec.weights[index], spec.lung_slices());
    let mut slice_gen = Vec::with_capacity(nz);
    for (g, &c) in counts.iter().enumerate() {
        slice_gen.extend(std::iter::repeat_n(g as u8, c));
    }
    // border slices continue the adjacent slab's texture
    let (first, last) = (slice_gen[0], *slice_gen.last().expect("at least one lung slice"));
    let mut slice_gen: Vec<u8> = std::iter::repeat_n(first, MASK_BORDER)
        .chain(slice_gen)
        .chain(std::iter::repeat_n(last, MASK_BORDER))
        .collect();
    slice_gen.truncate(nz);
    let plane = nx * ny;
    let generator_map: Vec<u8> = (0..n).map(|i| slice_gen[i / plane]).collect();

    let offsets: Vec<f64> = spec
        .generators
        .iter()
        .map(|_| {
            if spec.hu_jitter > 0.0 {
                rng.random_range(-spec.hu_jitter..=spec.hu_jitter)
            } else {
                0.0
            }
        })
        .collect();
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let needs_field = spec
        .generators
        .iter()
        .any(|g| matches!(g.kind, GeneratorKind::DiffuseLow { .. }));
    let field = if needs_field {
        let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut f = smooth(&raw, dims, DIFFUSE_SIGMA_VOXELS);
        let mean = f.iter().sum::<f64>() / n as f64;
        let sd = (f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        f.iter_mut().for_each(|v| *v = (*v - mean) / sd.max(f64::MIN_POSITIVE));
        f
    } else {
        Vec::new()
    };

    let mut data = vec![0.0; n];
    for i in 0..n {
        let g = usize::from(generator_map[i]);
        let off = offsets[g];
        data[i] = off
            + match spec.generators[g].kind {
                GeneratorKind::GaussianNoise { mean_hu, sd_hu } => mean_hu + sd_hu * white[i],
                GeneratorKind::DiffuseLow { mean_hu, sd_hu } => mean_hu + sd_hu * field[i],
                GeneratorKind::BlobbyLowAttenuation {
                    background_hu,
                    noise_sd_hu,
                    ..
                } => background_hu + noise_sd_hu * white[i],
                GeneratorKind::PleuralBand {
                    band_width_mm,
                    hole_hu,
                    background_hu,
                    noise_sd_hu,
                } => {
                    let x = i % nx;
                    let y = (i / nx) % ny;
                    let border = |v: usize, len: usize| {
                        (v as f64 - MASK_BORDER as f64).min((len - 1 - MASK_BORDER) as f64 - v as f64)
                    };
                    let d = border(x, nx) * spec.spacing_mm[0];
                    let d = d.min(border(y, ny) * spec.spacing_mm[1]);
                    let base = if d < band_width_mm { hole_hu } else { background_hu };
                    base + noise_sd_hu * white[i]
                }
            };
    }

    for (g, gen) in spec.generators.iter().enumerate() {
        let GeneratorKind::BlobbyLowAttenuation {
            hole_density,
            hole_radius_mm,
            hole_hu,
            noise_sd_hu,
            ..
        } = gen.kind
        else {
            continue;
        };
        let slices: Vec<usize> = (0..nz).filter(|&z| usize::from(slice_gen[z]) == g).collect();
        let (Some(&z0), Some(&z1)) = (slices.first(), slices.last()) else {
            continue;
        };
        let voxel_mm3: f64 = spec.spacing_mm.iter().product();
        let slab_cm3 = (plane * slices.len()) as f64 * voxel_mm3 / 1000.0;
        let holes = (hole_density * slab_cm3).round() as usize;
        let r = hole_radius_mm;
        let reach: [isize; 3] = std::array::from_fn(|a| (r / spec.spacing_mm[a]).ceil() as isize);
        for _ in 0..holes {
            let c = [
                rng.random_range(0.0..nx as f64),
                rng.random_range(0.0..ny as f64),
                rng.random_range(z0 as f64..(z1 + 1) as f64),
            ];
            let base: [isize; 3] = c.map(|v| v.floor() as isize);
            for dz in -reach[2]..=reach[2] {
                for dy in -reach[1]..=reach[1] {
                    for dx in -reach[0]..=reach[0] {
                        let p = [base[0] + dx, base[1] + dy, base[2] + dz];
                        if p.iter().zip(&dims).any(|(&v, &d)| v < 0 || v >= d as isize) {
                            continue;
                        }
                        let p = p.map(|v| v as usize);
                        let d2: f64 = (0..3)
                            .map(|a| ((p[a] as f64 + 0.5 - c[a]) * spec.spacing_mm[a]).powi(2))
                            .sum();
                        let idx = linear_index(dims, p);
                        if d2 <= r * r && usize::from(generator_map[idx]) == g {
                            data[idx] = hole_hu + offsets[g] + noise_sd_hu * white[idx];
                        }
                    }
                }
            }
        }
    }

    data.iter_mut().for_each(|v| *v = v.clamp(HU_MIN, HU_MAX).round());
    let mask = border_mask(dims)?;
    let label = label_from_map(&generator_map, &mask, &spec.generators)?;
    Ok(PhantomScan {
        scan_id: scan_id(index),
        volume: Volume::new(dims, spec.spacing_mm, data)?,
        mask,
        label,
        generator_map,
        slab_counts: counts,
    })
}

/// Generates every scan of `spec`; scans are independent and run in parallel.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<PhantomScan>> {
    spec.validate()?;
    (0..spec.n_scans).into_par_iter().map(|i| generate_scan(spec, i)).collect()
}

/// Writes scans, `labels.csv` and `manifest.json` under `dir`.
pub fn write_phantom(dir: impl AsRef<Path>, spec: &PhantomSpec, scans: &[PhantomScan]) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(scans.len());
    for s in scans {
        let rel = format!("scans/{}", s.scan_id);
        let base = dir.join(&rel);
        write_volume(base.join("volume.json"), &s.volume, Dtype::I16)?;
        write_mask(base.join("mask.json"), &s.mask)?;
        write_u8_map(base.join("generators.json"), s.volume.dims(), &s.generator_map)?;
        entries.push(ScanEntry {
            scan_id: s.scan_id.clone(),
            volume: format!("{rel}/volume.json"),
            mask: format!("{rel}/mask.json"),
            generator_map: Some(format!("{rel}/generators.json")),
        });
    }
    let labels: Vec<(String, GlobalLabel)> = scans.iter().map(|s| (s.scan_id.clone(), s.label)).collect();
    write_labels(dir.join("labels.csv"), &labels)?;
    let mut extra = serde_json::Map::new();
    extra.insert(
        "phantom".into(),
        serde_json::to_value(spec).map_err(|e| Error::json(dir.join("manifest.json"), e))?,
    );
    let manifest = Manifest {
        scans: entries,
        labels: Some("labels.csv".into()),
        extra,
    };
    manifest.write(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Voxel count per generator inside a window.
pub fn window_generator_counts(
    map: &[u8],
    dims: [usize; 3],
    origin: [usize; 3],
    window: [usize; 3],
    n_generators: usize,
) -> Vec<usize> {
    let mut counts = vec![0; n_generators];
    for z in origin[2]..origin[2] + window[2] {
        for y in origin[1]..origin[1] + window[1] {
            for x in origin[0]..origin[0] + window[0] {
                counts[usize::from(map[linear_index(dims, [x, y, z])])] += 1;
            }
        }
    }
    counts
}
