//! Configuration and the learning / prediction chain shared by the CLI and
//! the evaluation harness.
//!
//! Training runs: features (codebook or calibration fitted on training ROIs
//! only) → K-means prototypes → optional merging down to each checkpoint →
//! one regression per checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    assign_all, check_kind, dense_prototype_histogram, fit_prototypes, label_volume, prototype_histogram,
    LabeledPoint, PrototypeHistogram, PrototypeModel,
};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_HOLDOUT_FRACTION;
use crate::features::{FeatureKind, FeatureModel, RoiFeature, DEFAULT_CODEBOOK_POOL};
use crate::merging::{CoocUpdate, MergeConfig, Merger, RoiSite, DEFAULT_NEIGHBORHOOD_VOXELS};
use crate::preprocess::{sample_rois, IntensityMap, RoiPatch, SampleSpec};
use crate::regression::{FitOptions, RegressionModel};
use crate::seed::{derive, hash_str};
use crate::synth::PhantomScan;
use crate::volume::{read_labels, read_mask, read_volume, GlobalLabel, Manifest, Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub feature: FeatureKind,
    /// Defaults to the feature's own mapping (sigmoid for texton, linear otherwise).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity_map: Option<IntensityMap>,
    /// `sampling.seed` is ignored; sampling streams derive from `seed`.
    pub sampling: SampleSpec,
    pub k: usize,
    /// Smaller K values to merge down to; each gets its own regression.
    pub merge_checkpoints: Vec<usize>,
    pub neighborhood_voxels: usize,
    pub cooc_update: CoocUpdate,
    pub regression: FitOptions,
    pub folds: usize,
    pub codebook_pool: usize,
    /// Build histograms from a dense nearest-sample voxel labeling instead of
    /// the sample points themselves.
    pub dense_histograms: bool,
    pub disease_ratio: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            feature: FeatureKind::Texton,
            intensity_map: None,
            sampling: SampleSpec::default(),
            k: crate::clustering::DEFAULT_K,
            merge_checkpoints: Vec::new(),
            neighborhood_voxels: DEFAULT_NEIGHBORHOOD_VOXELS,
            cooc_update: CoocUpdate::Summation,
            regression: FitOptions::default(),
            folds: 4,
            codebook_pool: DEFAULT_CODEBOOK_POOL,
            dense_histograms: false,
            disease_ratio: 3.0,
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            seed: 0,
            manifest: None,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn intensity_map(&self) -> IntensityMap {
        self.intensity_map.unwrap_or_else(|| self.feature.default_map())
    }

    /// Root of the per-scan sampling streams.
    pub fn sampling_spec(&self) -> SampleSpec {
        SampleSpec {
            seed: derive(self.seed, "sampling", 0),
            ..self.sampling.clone()
        }
    }

    /// `k` followed by the merge checkpoints, descending and deduplicated.
    pub fn checkpoints(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = std::iter::once(self.k).chain(self.merge_checkpoints.iter().copied()).collect();
        ks.sort_unstable_by(|a, b| b.cmp(a));
        ks.dedup();
        ks
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k", format!("must be at least 2, got {}", self.k)));
        }
        if let Some(&bad) = self.merge_checkpoints.iter().find(|&&c| c == 0 || c > self.k) {
            return Err(Error::config(
                "merge_checkpoints",
                format!("{bad} is outside 1..={}", self.k),
            ));
        }
        if self.folds < 2 {
            return Err(Error::config("folds", format!("must be at least 2, got {}", self.folds)));
        }
        if self.codebook_pool == 0 {
            return Err(Error::config("codebook_pool", "must be positive"));
        }
        if !(self.disease_ratio > 0.0) {
            return Err(Error::config("disease_ratio", "must be positive"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config("holdout_fraction", "must lie in (0, 1)"));
        }
        if !(self.regression.tol > 0.0) || self.regression.max_iter == 0 {
            return Err(Error::config("regression", "tol and max_iter must be positive"));
        }
        self.sampling.validate()?;
        self.intensity_map().validate()
    }

    /// Checks that configured input paths exist.
    pub fn validate_paths(&self) -> Result<()> {
        if let Some(m) = &self.manifest {
            if !m.is_file() {
                return Err(Error::config("manifest", format!("{} does not exist", m.display())));
            }
        }
        Ok(())
    }
}

/// Sampled ROIs of one scan, with everything training and prediction need.
#[derive(Debug, Clone)]
pub struct ScanSamples {
    pub scan_id: String,
    pub label: Option<GlobalLabel>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub patches: Vec<RoiPatch>,
    /// Kept only for dense histograms.
    pub mask: Option<Mask>,
}

impl ScanSamples {
    pub fn patch_refs(&self) -> Vec<&RoiPatch> {
        self.patches.iter().collect()
    }

    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            patches: keep.iter().map(|&i| self.patches[i].clone()).collect(),
            ..self.clone_without_patches()
        }
    }

    fn clone_without_patches(&self) -> Self {
        Self {
            scan_id: self.scan_id.clone(),
            label: self.label,
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            patches: Vec::new(),
            mask: self.mask.clone(),
        }
    }
}

/// Samples one scan with a stream derived from `spec.seed` and the scan id.
pub fn sample_scan(
    scan_id: &str,
    vol: &Volume,
    mask: &Mask,
    label: Option<GlobalLabel>,
    spec: &SampleSpec,
    map: &IntensityMap,
    keep_mask: bool,
) -> Result<ScanSamples> {
    let scan_spec = SampleSpec {
        seed: derive(spec.seed, "scan", hash_str(scan_id)),
        ..spec.clone()
    };
    let outcome = sample_rois(vol, mask, &scan_spec, map)?;
    if outcome.patches.is_empty() {
        return Err(Error::TooFew {
            what: "ROIs in a scan",
            needed: 1,
            got: 0,
        });
    }
    Ok(ScanSamples {
        scan_id: scan_id.to_string(),
        label,
        dims: vol.dims(),
        spacing_mm: vol.spacing_mm(),
        patches: outcome.patches,
        mask: keep_mask.then(|| mask.clone()),
    })
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scans: Vec<ScanSamples>,
}

impl Dataset {
    /// Reads and samples every scan of a manifest. With `require_labels`,
    /// a scan missing from the labels CSV is an error naming it.
    pub fn load(manifest_path: impl AsRef<Path>, cfg: &PipelineConfig, require_labels: bool) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let labels: HashMap<String, GlobalLabel> = match &manifest.labels {
            Some(rel) => read_labels(root.join(rel))?.into_iter().collect(),
            None if require_labels => {
                return Err(Error::config("labels", format!("{} lists no labels file", manifest_path.display())))
            }
            None => HashMap::new(),
        };
        if require_labels {
            if let Some(entry) = manifest.scans.iter().find(|e| !labels.contains_key(&e.scan_id)) {
                return Err(Error::InvalidLabel {
                    scan_id: entry.scan_id.clone(),
                    reason: "missing from the labels file".into(),
                });
            }
        }
        let spec = cfg.sampling_spec();
        let map = cfg.intensity_map();
        let scans = manifest
            .scans
            .par_iter()
            .map(|entry| {
                let label = labels.get(&entry.scan_id).copied();
                let vol = read_volume(root.join(&entry.volume))?;
                let mask = read_mask(root.join(&entry.mask))?;
                sample_scan(&entry.scan_id, &vol, &mask, label, &spec, &map, cfg.dense_histograms)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scans })
    }

    /// Samples in-memory phantom scans.
    pub fn from_phantom(scans: &[PhantomScan], cfg: &PipelineConfig) -> Result<Self> {
        let spec = cfg.sampling_spec();
        let map = cfg.intensity_map();
        let scans = scans
            .par_iter()
            .map(|s| sample_scan(&s.scan_id, &s.volume, &s.mask, Some(s.label), &spec, &map, cfg.dense_histograms))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scans })
    }

    pub fn roi_count(&self) -> usize {
        self.scans.iter().map(|s| s.patches.len()).sum()
    }
}

/// Self-contained trained model: prediction needs nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub sampling: SampleSpec,
    pub dense_histograms: bool,
    /// Carries the feature model (codebook or calibration) in `feature`.
    pub prototypes: PrototypeModel,
    pub regression: RegressionModel,
    pub seed: u64,
}

impl TrainedModel {
    pub fn k(&self) -> usize {
        self.prototypes.k
    }

    pub fn feature_model(&self) -> Result<&FeatureModel> {
        self.prototypes
            .feature
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no feature configuration".into()))
    }

    /// Histogram and predicted label for a scan whose ROI features are known.
    pub fn predict_from_features(
        &self,
        scan: &ScanSamples,
        feats: &[RoiFeature],
    ) -> Result<(PrototypeHistogram, GlobalLabel)> {
        let labels = assign_all(feats, &self.prototypes)?;
        let h = scan_histogram(scan, &labels, self.k(), self.dense_histograms)?;
        let y = self.regression.predict(&h)?;
        Ok((h, y))
    }

    pub fn predict_scan(&self, scan: &ScanSamples) -> Result<(PrototypeHistogram, GlobalLabel)> {
        let fm = self.feature_model()?;
        check_kind(fm.kind, &self.prototypes)?;
        let feats = fm.extract_all(&scan.patch_refs())?;
        self.predict_from_features(scan, &feats)
    }

    /// Samples a new scan exactly as the training scans were sampled.
    pub fn sample(&self, scan_id: &str, vol: &Volume, mask: &Mask) -> Result<ScanSamples> {
        let map = self.feature_model()?.intensity_map;
        sample_scan(scan_id, vol, mask, None, &self.sampling, &map, self.dense_histograms)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("serializing model: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn scan_histogram(scan: &ScanSamples, labels: &[usize], k: usize, dense: bool) -> Result<PrototypeHistogram> {
    if !dense {
        return prototype_histogram(labels, k);
    }
    let mask = scan
        .mask
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("dense histograms need the mask of scan {}", scan.scan_id)))?;
    let points: Vec<LabeledPoint> = scan
        .patches
        .iter()
        .zip(labels)
        .map(|(p, &label)| LabeledPoint { voxel: p.center, label })
        .collect();
    dense_prototype_histogram(&label_volume(mask, scan.spacing_mm, &points)?, k)
}

/// Trains one model per checkpoint K (largest first) on `scans`.
pub fn train(scans: &[&ScanSamples], cfg: &PipelineConfig) -> Result<Vec<TrainedModel>> {
    cfg.validate()?;
    let labels: Vec<GlobalLabel> = scans
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| Error::InvalidLabel {
                scan_id: s.scan_id.clone(),
                reason: "training scans need a label".into(),
            })
        })
        .collect::<Result<_>>()?;
    let rois: Vec<&RoiPatch> = scans.iter().flat_map(|s| s.patches.iter()).collect();
    log::info!("training on {} scans, {} ROIs", scans.len(), rois.len());

    let feature_model = FeatureModel::fit(
        cfg.feature,
        cfg.intensity_map(),
        &rois,
        cfg.codebook_pool,
        derive(cfg.seed, "codebook", 0),
    )?;
    let feats = feature_model.extract_all(&rois)?;
    let means: Vec<f64> = rois.iter().map(|r| r.mean()).collect();
    let mut fit = fit_prototypes(&feats, &means, cfg.k, derive(cfg.seed, "kmeans", 0))?;
    fit.model.feature = Some(feature_model);

    let ks = cfg.checkpoints();
    let mut snapshots = vec![(fit.model.clone(), fit.assignments.clone())];
    if ks.len() > 1 {
        let mut sites = Vec::with_capacity(scans.len());
        let mut next = 0;
        for s in scans {
            sites.push(
                s.patches
                    .iter()
                    .map(|p| {
                        next += 1;
                        RoiSite { voxel: p.center, roi: next - 1 }
                    })
                    .collect(),
            );
        }
        let merge_cfg = MergeConfig {
            neighborhood_voxels: cfg.neighborhood_voxels,
            update: cfg.cooc_update,
            seed: derive(cfg.seed, "merge", 0),
        };
        let mut merger = Merger::new(&fit.model, &feats, &means, &fit.assignments, sites, merge_cfg)?;
        let target = *ks.last().expect("non-empty checkpoints");
        snapshots.extend(merger.merge_to(target, &ks[1..])?);
    }

    let sampling = cfg.sampling_spec();
    snapshots
        .into_iter()
        .map(|(prototypes, roi_labels)| {
            let mut x = Vec::with_capacity(scans.len());
            let mut offset = 0;
            for s in scans {
                let n = s.patches.len();
                x.push(scan_histogram(s, &roi_labels[offset..offset + n], prototypes.k, cfg.dense_histograms)?.values);
                offset += n;
            }
            let mut regression = RegressionModel::fit(&x, &labels, &cfg.regression)?;
            log::debug!(
                "K = {}: regression stopped after {} iterations (converged: {})",
                prototypes.k,
                regression.iterations,
                regression.converged
            );
            regression.objective_history.clear();
            Ok(TrainedModel {
                sampling: sampling.clone(),
                dense_histograms: cfg.dense_histograms,
                prototypes,
                regression,
                seed: cfg.seed,
            })
        })
        .collect()
}
