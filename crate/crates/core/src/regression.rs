//! Least squares from prototype histograms to class mixtures, with every row of
//! the coefficient matrix constrained to the probability simplex.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::PrototypeHistogram;
use crate::error::{Error, Result};
use crate::volume::{GlobalLabel, LABEL_SUM_TOL};

pub const CLASSES: usize = 4;

/// Euclidean projection onto `{a ≥ 0, Σa = 1}` by the sort-and-threshold rule.
pub fn project_to_simplex(v: [f64; CLASSES]) -> [f64; CLASSES] {
    let mut u = v;
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once the norm of the gradient mapping falls below this.
    pub tol: f64,
    pub power_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol: 1e-8,
            power_iterations: 200,
        }
    }
}

/// `A`, with `A[k][c]` read as the probability of class `c` given prototype `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub a: Vec<[f64; CLASSES]>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖XA − Y‖²_F` at `A⁰` and after every iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_history: Vec<f64>,
}

fn frobenius_sq(x: &[Vec<f64>], y: &[[f64; CLASSES]], a: &[[f64; CLASSES]]) -> f64 {
    let mut total = 0.0;
    for (row, target) in x.iter().zip(y) {
        let mut pred = [0.0; CLASSES];
        for (&w, arow) in row.iter().zip(a) {
            for c in 0..CLASSES {
                pred[c] += w * arow[c];
            }
        }
        total += pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    }
    total
}

/// Largest eigenvalue of the symmetric PSD `k × k` matrix `m` (row-major).
fn power_iteration(m: &[f64], k: usize, iters: usize) -> f64 {
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w: Vec<f64> = (0..k)
            .map(|i| m[i * k..(i + 1) * k].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

fn check_simplex_row(row: &[f64], what: &str, index: usize) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > LABEL_SUM_TOL {
        return Err(Error::Invalid(format!("{what} row {index} is not on the simplex (sum {sum})")));
    }
    Ok(())
}

impl RegressionModel {
    pub fn k(&self) -> usize {
        self.a.len()
    }

    /// Projected gradient on `‖XA − Y‖²_F` from `A⁰ = 1/4`.
    pub fn fit(x: &[Vec<f64>], y: &[GlobalLabel], opts: &FitOptions) -> Result<Self> {
        let n = x.len();
        if n == 0 {
            return Err(Error::TooFew {
                what: "training scans",
                needed: 1,
                got: 0,
            });
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} histograms vs {} labels", y.len())));
        }
        let k = x[0].len();
        for (i, row) in x.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "histogram {i} has length {}, expected {k}",
                    row.len()
                )));
            }
            check_simplex_row(row, "histogram", i)?;
        }
        let y: Vec<[f64; CLASSES]> = y.iter().map(GlobalLabel::as_array).collect();

        let mut xtx = vec![0.0; k * k];
        let mut xty = vec![[0.0; CLASSES]; k];
        for (row, target) in x.iter().zip(&y) {
            for i in 0..k {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..k {
                    xtx[i * k + j] += row[i] * row[j];
                }
                for c in 0..CLASSES {
                    xty[i][c] += row[i] * target[c];
                }
            }
        }
        let lambda = power_iteration(&xtx, k, opts.power_iterations);
        let step = 1.0 / (2.0 * lambda);

        let mut a = vec![[0.25; CLASSES]; k];
        let mut history = vec![frobenius_sq(x, &y, &a)];
        let mut iterations = 0;
        let mut converged = false;
        let mut grad = vec![[0.0; CLASSES]; k];
        while iterations < opts.max_iter {
            for i in 0..k {
                let mut g = [0.0; CLASSES];
                for j in 0..k {
                    let m = xtx[i * k + j];
                    if m != 0.0 {
                        for c in 0..CLASSES {
                            g[c] += m * a[j][c];
                        }
                    }
                }
                for c in 0..CLASSES {
                    grad[i][c] = 2.0 * (g[c] - xty[i][c]);
                }
            }
            let mut moved_sq = 0.0;
            for i in 0..k {
                let trial = std::array::from_fn(|c| a[i][c] - step * grad[i][c]);
                let next = project_to_simplex(trial);
                moved_sq += next.iter().zip(&a[i]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                a[i] = next;
            }
            iterations += 1;
            let obj = frobenius_sq(x, &y, &a);
            let prev = *history.last().expect("non-empty history");
            debug_assert!(
                obj <= prev + 1e-18 + 1e-12 * prev,
                "objective rose from {prev} to {obj} at iteration {iterations}"
            );
            history.push(obj);
            if lambda == 0.0 || moved_sq.sqrt() / step < opts.tol {
                converged = true;
                break;
            }
        }
        Ok(Self {
            a,
            iterations,
            converged,
            objective_history: history,
        })
    }

    /// `y = xᵀA`.
    pub fn predict(&self, h: &PrototypeHistogram) -> Result<GlobalLabel> {
        if h.values.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "histogram of length {} for a K = {} model",
                h.values.len(),
                self.k()
            )));
        }
        let mut y = [0.0; CLASSES];
        for (&w, row) in h.values.iter().zip(&self.a) {
            for c in 0..CLASSES {
                y[c] += w * row[c];
            }
        }
        GlobalLabel::from_array(y)
    }

    /// Class distribution attached to a prototype, i.e. row `k` of `A`.
    pub fn class_posterior(&self, prototype: usize) -> Option<[f64; CLASSES]> {
        self.a.get(prototype).copied()
    }

    /// Writes `prototype_id,cle,ple,pse,ne`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        writeln!(buf, "prototype_id,cle,ple,pse,ne").expect("write to Vec");
        for (k, row) in self.a.iter().enumerate() {
            writeln!(buf, "{k},{},{},{},{}", row[0], row[1], row[2], row[3]).expect("write to Vec");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}
