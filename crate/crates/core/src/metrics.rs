//! Rank and linear correlation, plus the PCA projection behind surface export.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid(
            "correlation needs at least two observations",
        ));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN in correlation input".into()));
    }
    Ok(())
}

/// Number of pairs inside runs of equal keys in a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort on `v`, returning the number of inversions.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b in O(n log n).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let tx = tied_pairs(&xs);
    let tj = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let ty = tied_pairs(&ys);

    let n0 = n * (n - 1) / 2;
    if tx == n0 || ty == n0 {
        return Err(Error::UndefinedStatistic(
            "kendall tau of an all-tied list".into(),
        ));
    }
    let numer = n0 as f64 - tx as f64 - ty as f64 + tj as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedStatistic(
            "pearson r with zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub kendall_tau: f64,
    pub pearson_r: f64,
    pub n_pairs: usize,
}

pub fn correlation_report(predicted: &[f64], actual: &[f64]) -> Result<CorrelationReport> {
    Ok(CorrelationReport {
        kendall_tau: kendall_tau(predicted, actual)?,
        pearson_r: pearson(predicted, actual)?,
        n_pairs: predicted.len(),
    })
}

pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// One row per input vector.
    pub coords: Array2<f64>,
    /// Unit eigenvectors as rows, largest eigenvalue first.
    pub components: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue over total variance.
    pub explained: Vec<f64>,
    pub mean: Array1<f64>,
}

impl PcaProjection {
    /// Maps coordinates back to input space.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.coords.dot(&self.components) + &self.mean
    }
}

fn orthogonalize(v: &mut Array1<f64>, basis: &[Array1<f64>]) {
    // Two passes keep the result orthogonal to working precision.
    for _ in 0..2 {
        for b in basis {
            let c = v.dot(b);
            v.scaled_add(-c, b);
        }
    }
}

fn fix_sign(v: &mut Array1<f64>) {
    let mut k = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        v.mapv_inplace(|a| -a);
    }
}

/// Projects rows of `x` onto the top-`k` principal axes found by power
/// iteration with deflation.
pub fn pca_project(x: ArrayView2<f64>, k: usize) -> Result<PcaProjection> {
    let (n, d) = x.dim();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("k must be in 1..={d}, got {k}")));
    }
    if n < k + 1 {
        return Err(Error::invalid(format!(
            "pca needs at least {} vectors, got {n}",
            k + 1
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let trace = cov.diag().sum();
    if !trace.is_finite() {
        return Err(Error::Domain("non-finite input to pca".into()));
    }
    if trace <= 0.0 {
        return Err(Error::UndefinedStatistic(
            "pca of vectors with zero variance".into(),
        ));
    }

    let mut deflated = cov.clone();
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let floor = trace * 1e-14;
    for _ in 0..k {
        // Start from the strongest column, i.e. one power step applied to a unit vector.
        let mut v = deflated
            .columns()
            .into_iter()
            .map(|c| c.to_owned())
            .max_by(|a, b| a.dot(a).total_cmp(&b.dot(b)))
            .expect("d > 0");
        orthogonalize(&mut v, &basis);
        let mut lambda;
        if v.dot(&v).sqrt() <= floor {
            // Remaining spectrum is zero; any orthonormal completion will do.
            v = (0..d)
                .map(|j| {
                    let mut e = Array1::zeros(d);
                    e[j] = 1.0;
                    orthogonalize(&mut e, &basis);
                    e
                })
                .max_by(|a, b| a.dot(a).total_cmp(&b.dot(b)))
                .expect("d > 0");
            v /= v.dot(&v).sqrt();
            lambda = 0.0;
        } else {
            v /= v.dot(&v).sqrt();
            let mut converged = false;
            lambda = 0.0;
            for _ in 0..PCA_MAX_ITERATIONS {
                let mut w = deflated.dot(&v);
                lambda = v.dot(&w);
                let residual = (&w - &(&v * lambda)).dot(&(&w - &(&v * lambda))).sqrt();
                if residual <= PCA_TOLERANCE * trace {
                    converged = true;
                    break;
                }
                orthogonalize(&mut w, &basis);
                let norm = w.dot(&w).sqrt();
                if norm <= floor {
                    lambda = 0.0;
                    converged = true;
                    break;
                }
                v = w / norm;
            }
            if !converged {
                return Err(Error::NoConvergence {
                    iterations: PCA_MAX_ITERATIONS,
                });
            }
        }
        fix_sign(&mut v);
        let outer = v
            .view()
            .insert_axis(Axis(1))
            .dot(&v.view().insert_axis(Axis(0)));
        deflated.scaled_add(-lambda, &outer);
        eigenvalues.push(lambda.max(0.0));
        basis.push(v);
    }

    let mut components = Array2::zeros((k, d));
    for (mut row, v) in components.rows_mut().into_iter().zip(&basis) {
        row.assign(v);
    }
    let coords = centered.dot(&components.t());
    let explained = eigenvalues.iter().map(|l| l / trace).collect();
    Ok(PcaProjection {
        coords,
        components,
        eigenvalues,
        explained,
        mean,
    })
}

/// Writes `x, y, predicted_score` rows for external plotting.
pub fn write_surface_csv(path: &Path, coords: ArrayView2<f64>, scores: &[f64]) -> Result<()> {
    if coords.ncols() != 2 || coords.nrows() != scores.len() {
        return Err(Error::invalid(
            "surface export needs 2-D coordinates and one score per row",
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "predicted_score"])?;
    for (row, s) in coords.rows().into_iter().zip(scores) {
        w.write_record([row[0].to_string(), row[1].to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
