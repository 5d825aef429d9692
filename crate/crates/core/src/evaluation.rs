//! Agreement and stability measures: ICC, cross validation, split-half
//! reproducibility with optimal matching, and disease-prototype selection.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::clustering::{assign_all, PrototypeHistogram};
use crate::error::{Error, Result};
use crate::pipeline::{train, Dataset, PipelineConfig, ScanSamples, TrainedModel};
use crate::volume::{GlobalLabel, TissueClass};

/// ICC(A,1): two-way random effects, absolute agreement, single measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IccReport {
    pub icc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// One-sided p-value of the row effect F test.
    pub p: f64,
    pub n: usize,
}

/// Mean squares of an `n × 2` two-way table: (rows, columns, residual).
fn mean_squares(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let k = 2.0;
    let grand = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (n * k);
    let col_a = a.iter().sum::<f64>() / n;
    let col_b = b.iter().sum::<f64>() / n;
    let mut ss_rows = 0.0;
    let mut ss_total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let row = (x + y) / k;
        ss_rows += k * (row - grand).powi(2);
        ss_total += (x - grand).powi(2) + (y - grand).powi(2);
    }
    let ss_cols = n * ((col_a - grand).powi(2) + (col_b - grand).powi(2));
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    (
        ss_rows / (n - 1.0),
        ss_cols / (k - 1.0),
        ss_err / ((n - 1.0) * (k - 1.0)),
    )
}

fn f_quantile(q: f64, d1: f64, d2: f64) -> Result<f64> {
    let f = FisherSnedecor::new(d1, d2).map_err(|e| Error::Invalid(format!("F({d1}, {d2}): {e}")))?;
    Ok(f.inverse_cdf(q))
}

/// ICC(A,1) between paired measurements with a 95% F-based interval.
pub fn icc(a: &[f64], b: &[f64]) -> Result<IccReport> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} measurements", a.len(), b.len())));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::TooFew {
            what: "subjects for ICC",
            needed: 3,
            got: n,
        });
    }
    let (msr, msc, mse) = mean_squares(a, b);
    if msr == 0.0 && msc == 0.0 && mse == 0.0 {
        return Err(Error::Invalid("ICC undefined: both columns are constant and equal".into()));
    }
    let (nf, k) = (n as f64, 2.0);
    let value = (msr - mse) / (msr + (k - 1.0) * mse + k * (msc - mse) / nf);
    if mse == 0.0 && msc == 0.0 {
        return Ok(IccReport {
            icc: 1.0,
            ci_lo: 1.0,
            ci_hi: 1.0,
            p: 0.0,
            n,
        });
    }
    let df_rows = nf - 1.0;
    let df_err = (nf - 1.0) * (k - 1.0);
    let p = if mse == 0.0 {
        0.0
    } else {
        let f = FisherSnedecor::new(df_rows, df_err).map_err(|e| Error::Invalid(e.to_string()))?;
        1.0 - f.cdf(msr / mse)
    };
    // Satterthwaite degrees of freedom for the interval
    let ca = k * value / (nf * (1.0 - value));
    let cb = 1.0 + k * value * (nf - 1.0) / (nf * (1.0 - value));
    let v = (ca * msc + cb * mse).powi(2)
        / ((ca * msc).powi(2) / (k - 1.0) + (cb * mse).powi(2) / df_err);
    let v = if v.is_finite() && v > 0.0 { v.min(1e7) } else { 1.0 };
    let f_lo = f_quantile(0.975, df_rows, v)?;
    let f_hi = f_quantile(0.975, v, df_rows)?;
    let tail = k * msc + (k * nf - k - nf) * mse;
    let ci_lo = nf * (msr - f_lo * mse) / (f_lo * tail + nf * msr);
    let ci_hi = nf * (f_hi * msr - mse) / (tail + nf * f_hi * msr);
    Ok(IccReport {
        icc: value,
        ci_lo: ci_lo.min(value),
        ci_hi: ci_hi.max(value),
        p,
        n,
    })
}

/// Minimum-cost perfect matching on a square matrix; `result[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if let Some(bad) = cost.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "cost matrix must be square: {n} rows, a row of length {}",
            bad.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // potentials u (rows), v (columns); p[j] = row matched to column j, 1-based with 0 as sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub k: usize,
    /// Matched ROI mass over all ROIs.
    pub r: f64,
    /// Mean over first-model prototypes of the fraction of their ROIs that
    /// the matched second-model prototype also holds.
    pub per_prototype_accuracy: f64,
    /// `matching[i]` is the second-model prototype paired with prototype `i`.
    pub matching: Vec<usize>,
    pub n: usize,
}

/// Label agreement of two models on the same ROIs, maximized over prototype
/// correspondences.
pub fn reproducibility(l1: &[usize], l2: &[usize], k: usize) -> Result<ReproReport> {
    if l1.len() != l2.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} labels", l1.len(), l2.len())));
    }
    if l1.is_empty() {
        return Err(Error::TooFew {
            what: "shared ROIs",
            needed: 1,
            got: 0,
        });
    }
    let mut c = vec![vec![0.0; k]; k];
    for (&a, &b) in l1.iter().zip(l2) {
        if a >= k || b >= k {
            return Err(Error::Invalid(format!("label out of range for K = {k}")));
        }
        c[a][b] += 1.0;
    }
    let neg: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let matching = hungarian(&neg)?;
    let matched: f64 = matching.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
    let mut acc = 0.0;
    let mut populated = 0usize;
    for (i, &j) in matching.iter().enumerate() {
        let row: f64 = c[i].iter().sum();
        if row > 0.0 {
            acc += c[i][j] / row;
            populated += 1;
        }
    }
    Ok(ReproReport {
        k,
        r: matched / l1.len() as f64,
        per_prototype_accuracy: acc / populated as f64,
        matching,
        n: l1.len(),
    })
}

/// Prototypes whose mean occurrence in the disease group is at least `ratio`
/// times that in the normal group (and positive).
pub fn disease_prototypes(
    disease: &[PrototypeHistogram],
    normal: &[PrototypeHistogram],
    ratio: f64,
) -> Result<Vec<usize>> {
    if disease.is_empty() || normal.is_empty() {
        return Err(Error::TooFew {
            what: "scans in each group",
            needed: 1,
            got: 0,
        });
    }
    let k = disease[0].k();
    if disease.iter().chain(normal).any(|h| h.k() != k) {
        return Err(Error::DimensionMismatch("histograms of different K".into()));
    }
    let mean = |group: &[PrototypeHistogram], i: usize| {
        group.iter().map(|h| h.values[i]).sum::<f64>() / group.len() as f64
    };
    Ok((0..k)
        .filter(|&i| {
            let d = mean(disease, i);
            d > 0.0 && d >= ratio * mean(normal, i)
        })
        .collect())
}

/// Scan-to-fold assignment from a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: usize,
    /// Fold of each scan, by dataset position.
    pub fold_of: Vec<usize>,
}

impl FoldPlan {
    pub fn new(n_scans: usize, folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::config("folds", "need at least 2"));
        }
        let needed = (2 * folds).max(8);
        if n_scans < needed {
            return Err(Error::TooFew {
                what: "scans for cross validation",
                needed,
                got: n_scans,
            });
        }
        let mut order: Vec<usize> = (0..n_scans).collect();
        order.shuffle(&mut crate::seed::rng(crate::seed::derive(seed, "folds", 0)));
        let mut fold_of = vec![0; n_scans];
        for (pos, &s) in order.iter().enumerate() {
            fold_of[s] = pos % folds;
        }
        Ok(Self { folds, fold_of })
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&s| self.fold_of[s] != fold).collect()
    }

    pub fn test(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&s| self.fold_of[s] == fold).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    /// One model per K, largest first.
    pub models: Vec<TrainedModel>,
    /// `(scan position, prediction per model)` for every test scan.
    pub predictions: Vec<(usize, Vec<GlobalLabel>)>,
}

/// Trains on every scan outside `fold` and predicts the scans inside it.
///
/// Receives the whole dataset so tests can check that test scans never
/// influence the trained models.
pub fn train_fold(dataset: &Dataset, plan: &FoldPlan, fold: usize, cfg: &PipelineConfig) -> Result<FoldResult> {
    let train_scans: Vec<&ScanSamples> = plan.train(fold).into_iter().map(|s| &dataset.scans[s]).collect();
    let models = train(&train_scans, cfg)?;
    let feature_model = models[0].feature_model()?;
    let mut predictions = Vec::new();
    for s in plan.test(fold) {
        let feats = feature_model.extract_all(&dataset.scans[s].patch_refs())?;
        let preds = models
            .iter()
            .map(|m| m.predict_from_features(&dataset.scans[s], &feats).map(|(_, y)| y))
            .collect::<Result<Vec<_>>>()?;
        predictions.push((s, preds));
    }
    Ok(FoldResult { models, predictions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccEntry {
    pub class: TissueClass,
    pub k: usize,
    #[serde(flatten)]
    pub report: IccReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPrediction {
    pub scan_id: String,
    pub fold: usize,
    pub k: usize,
    pub predicted: GlobalLabel,
    pub truth: GlobalLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Evaluated K values, largest first.
    pub ks: Vec<usize>,
    pub entries: Vec<IccEntry>,
    pub predictions: Vec<CvPrediction>,
}

impl CvReport {
    pub fn get(&self, class: TissueClass, k: usize) -> Option<&IccReport> {
        self.entries
            .iter()
            .find(|e| e.class == class && e.k == k)
            .map(|e| &e.report)
    }

    /// Writes `class,K,icc,ci_lo,ci_hi,p`.
    pub fn write_icc_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "class,K,icc,ci_lo,ci_hi,p").expect("write to Vec");
        for e in &self.entries {
            let r = &e.report;
            writeln!(buf, "{},{},{},{},{},{}", e.class.name(), e.k, r.icc, r.ci_lo, r.ci_hi, r.p)
                .expect("write to Vec");
        }
        write_file(path.as_ref(), &buf)
    }

    /// Long format: one row per (scan, K, class).
    pub fn write_predictions_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "scan_id,fold,K,class,predicted,truth").expect("write to Vec");
        for p in &self.predictions {
            for c in TissueClass::ALL {
                writeln!(
                    buf,
                    "{},{},{},{},{},{}",
                    p.scan_id,
                    p.fold,
                    p.k,
                    c.name(),
                    p.predicted.get(c),
                    p.truth.get(c)
                )
                .expect("write to Vec");
            }
        }
        write_file(path.as_ref(), &buf)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Out-of-fold predictions pooled across folds, scored per class and K.
pub fn cross_validate(dataset: &Dataset, cfg: &PipelineConfig) -> Result<CvReport> {
    cfg.validate()?;
    let plan = FoldPlan::new(dataset.scans.len(), cfg.folds, cfg.seed)?;
    let truth: Vec<GlobalLabel> = dataset
        .scans
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| Error::InvalidLabel {
                scan_id: s.scan_id.clone(),
                reason: "no label for this scan".into(),
            })
        })
        .collect::<Result<_>>()?;
    let ks = cfg.checkpoints();
    let mut predicted: Vec<Vec<Option<GlobalLabel>>> = vec![vec![None; dataset.scans.len()]; ks.len()];
    for fold in 0..plan.folds {
        log::info!("fold {}/{}", fold + 1, plan.folds);
        let result = train_fold(dataset, &plan, fold, cfg)?;
        for (s, preds) in result.predictions {
            for (ki, y) in preds.into_iter().enumerate() {
                predicted[ki][s] = Some(y);
            }
        }
    }
    let mut entries = Vec::new();
    let mut predictions = Vec::new();
    for (ki, &k) in ks.iter().enumerate() {
        let preds: Vec<GlobalLabel> = predicted[ki]
            .iter()
            .map(|p| p.expect("every scan is in exactly one test fold"))
            .collect();
        for c in TissueClass::ALL {
            let a: Vec<f64> = preds.iter().map(|p| p.get(c)).collect();
            let b: Vec<f64> = truth.iter().map(|t| t.get(c)).collect();
            entries.push(IccEntry {
                class: c,
                k,
                report: icc(&a, &b)?,
            });
        }
        for (s, p) in preds.into_iter().enumerate() {
            predictions.push(CvPrediction {
                scan_id: dataset.scans[s].scan_id.clone(),
                fold: plan.fold_of[s],
                k,
                predicted: p,
                truth: truth[s],
            });
        }
    }
    Ok(CvReport {
        ks,
        entries,
        predictions,
    })
}

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

/// Splits subjects into two random halves, trains each on its half (minus a
/// held-out ROI pool), and compares both models' labels on the pool at every K.
pub fn split_half_reproducibility(dataset: &Dataset, cfg: &PipelineConfig) -> Result<Vec<ReproReport>> {
    cfg.validate()?;
    let n = dataset.scans.len();
    if n < 2 {
        return Err(Error::TooFew {
            what: "scans for split-half",
            needed: 2,
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::seed::rng(crate::seed::derive(cfg.seed, "split-half", 0)));
    let (half_a, half_b) = order.split_at(n / 2);

    let mut held_out = Vec::new();
    let mut reduced = Vec::with_capacity(n);
    for (s, scan) in dataset.scans.iter().enumerate() {
        let mut idx: Vec<usize> = (0..scan.patches.len()).collect();
        idx.shuffle(&mut crate::seed::rng(crate::seed::derive(cfg.seed, "holdout", s as u64)));
        let cut = (scan.patches.len() as f64 * cfg.holdout_fraction).round() as usize;
        let (out, keep) = idx.split_at(cut);
        held_out.extend(out.iter().map(|&i| &scan.patches[i]));
        reduced.push(scan.subset(keep));
    }

    let train_half = |half: &[usize], tag: &str| -> Result<Vec<TrainedModel>> {
        let scans: Vec<&ScanSamples> = half.iter().map(|&s| &reduced[s]).collect();
        let half_cfg = PipelineConfig {
            seed: crate::seed::derive(cfg.seed, tag, 0),
            ..cfg.clone()
        };
        train(&scans, &half_cfg)
    };
    let models_a = train_half(half_a, "half-a")?;
    let models_b = train_half(half_b, "half-b")?;
    let feats_a = models_a[0].feature_model()?.extract_all(&held_out)?;
    let feats_b = models_b[0].feature_model()?.extract_all(&held_out)?;
    models_a
        .iter()
        .zip(&models_b)
        .map(|(ma, mb)| {
            let la = assign_all(&feats_a, &ma.prototypes)?;
            let lb = assign_all(&feats_b, &mb.prototypes)?;
            reproducibility(&la, &lb, ma.prototypes.k)
        })
        .collect()
}

pub fn write_repro_csv(path: impl AsRef<Path>, reports: &[ReproReport]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "K,R,per_prototype_accuracy,n").expect("write to Vec");
    for r in reports {
        writeln!(buf, "{},{},{},{}", r.k, r.r, r.per_prototype_accuracy, r.n).expect("write to Vec");
    }
    write_file(path.as_ref(), &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perfect_agreement() {
        let a = [0.1, 0.5, 0.3, 0.9, 0.2];
        let r = icc(&a, &a).unwrap();
        assert_eq!(r.icc, 1.0);
        assert_eq!((r.ci_lo, r.ci_hi), (1.0, 1.0));
    }

    #[test]
    fn constant_columns_rejected() {
        assert!(icc(&[0.2; 5], &[0.2; 5]).is_err());
        assert!(icc(&[0.2, 0.3], &[0.2, 0.3]).is_err());
    }

    #[test]
    fn shuffled_pairs_near_zero() {
        let mut rng = crate::seed::rng(11);
        let a: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let mut b = a.clone();
        b.shuffle(&mut rng);
        let r = icc(&a, &b).unwrap();
        assert!(r.icc.abs() < 0.3, "{r:?}");
        assert!(r.ci_lo <= r.icc && r.icc <= r.ci_hi);
    }

    #[test]
    fn matches_manual_anova_table() {
        let a = [9.0, 6.0, 8.0, 7.0, 10.0];
        let b = [2.0, 1.0, 4.0, 1.0, 5.0];
        // grand mean 5.3, row means 5.5 3.5 6 4 7.5, column means 8 and 2.6
        let ss_rows = 2.0 * [0.2f64, -1.8, 0.7, -1.3, 2.2].iter().map(|d| d * d).sum::<f64>();
        let ss_cols = 5.0 * (2.7f64.powi(2) + 2.7f64.powi(2));
        let ss_total: f64 = a.iter().chain(&b).map(|v| (v - 5.3f64).powi(2)).sum();
        let (msr, msc, mse) = (ss_rows / 4.0, ss_cols, (ss_total - ss_rows - ss_cols) / 4.0);
        let expected = (msr - mse) / (msr + mse + 2.0 * (msc - mse) / 5.0);
        let r = icc(&a, &b).unwrap();
        assert!((r.icc - expected).abs() < 1e-10);
        let (m1, m2, m3) = mean_squares(&a, &b);
        assert!((m1 - msr).abs() < 1e-10 && (m2 - msc).abs() < 1e-10 && (m3 - mse).abs() < 1e-10);
        assert!(r.ci_lo <= r.icc && r.icc <= r.ci_hi);
        assert!((0.0..=1.0).contains(&r.p));
    }

    #[test]
    fn hungarian_small() {
        let overlap = [[5.0, 1.0], [2.0, 7.0]];
        let neg: Vec<Vec<f64>> = overlap.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        assert_eq!(hungarian(&neg).unwrap(), vec![0, 1]);
        let anti = vec![vec![-1.0, -9.0], vec![-8.0, -2.0]];
        assert_eq!(hungarian(&anti).unwrap(), vec![1, 0]);
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian(&[]).unwrap().is_empty());
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn hungarian_matches_exhaustive(seed in any::<u64>(), n in 1usize..=6) {
            let mut rng = crate::seed::rng(seed);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0..50) as f64).collect()).collect();
            let a = hungarian(&cost).unwrap();
            let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
            let best = permutations(n).iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(total(&a), best);
            let identity: Vec<usize> = (0..n).collect();
            prop_assert!(total(&a) <= total(&identity));
        }

        #[test]
        fn reproducibility_is_relabeling_invariant(seed in any::<u64>(), k in 2usize..8) {
            let mut rng = crate::seed::rng(seed);
            let l1: Vec<usize> = (0..300).map(|_| rng.random_range(0..k)).collect();
            let l2: Vec<usize> = l1.iter().map(|&l| if rng.random::<f64>() < 0.3 { rng.random_range(0..k) } else { l }).collect();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let r = reproducibility(&l1, &l2, k).unwrap().r;
            let relabeled: Vec<usize> = l2.iter().map(|&l| perm[l]).collect();
            prop_assert_eq!(reproducibility(&l1, &relabeled, k).unwrap().r, r);
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn reproducibility_cases() {
        let l: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let same = reproducibility(&l, &l, 5).unwrap();
        assert_eq!(same.r, 1.0);
        assert_eq!(same.matching, vec![0, 1, 2, 3, 4]);
        let relabeled: Vec<usize> = l.iter().map(|&x| (x + 2) % 5).collect();
        assert_eq!(reproducibility(&l, &relabeled, 5).unwrap().r, 1.0);
        let mut rng = crate::seed::rng(3);
        let a: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        let b: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        assert!(reproducibility(&a, &b, 10).unwrap().r < 0.2);
        assert!(reproducibility(&a, &b[..5], 10).is_err());
    }

    #[test]
    fn disease_rule() {
        let h = |v: Vec<f64>| PrototypeHistogram::new(v).unwrap();
        let d = [h(vec![0.30, 0.10, 0.60])];
        let n = [h(vec![0.05, 0.10, 0.85])];
        assert_eq!(disease_prototypes(&d, &n, 3.0).unwrap(), vec![0]);
        let d = [h(vec![0.2, 0.0, 0.8])];
        let n = [h(vec![0.0, 0.0, 1.0])];
        assert_eq!(disease_prototypes(&d, &n, 3.0).unwrap(), vec![0]);
        assert!(disease_prototypes(&d, &[], 3.0).is_err());
    }

    #[test]
    fn folds_partition_scans() {
        let plan = FoldPlan::new(40, 4, 7).unwrap();
        let mut seen = vec![0; 40];
        for f in 0..4 {
            let test = plan.test(f);
            assert_eq!(test.len(), 10);
            let train = plan.train(f);
            assert!(test.iter().all(|t| !train.contains(t)));
            for t in test {
                seen[t] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(FoldPlan::new(7, 4, 0).is_err());
        assert!(FoldPlan::new(40, 1, 0).is_err());
    }
}
