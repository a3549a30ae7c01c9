use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean-centred projection onto the leading principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// One row per input row, `dims` columns.
    pub coordinates: Vec<Vec<f64>>,
    /// Fraction of total variance per component, non-increasing.
    pub explained_variance_ratio: Vec<f64>,
    /// Unit principal axes, one per component.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Principal component projection.
///
/// Each axis is oriented so that its largest-magnitude loading is positive.
pub fn pca_project(rows: &[Vec<f64>], dims: usize) -> Result<PcaProjection> {
    let n = rows.len();
    let f = rows.first().map_or(0, Vec::len);
    if dims == 0 || dims > f {
        return Err(Error::invalid(format!("cannot keep {dims} components of {f}-dimensional data")));
    }
    if n < dims {
        return Err(Error::invalid(format!("{n} rows are fewer than {dims} components")));
    }
    if rows.iter().any(|r| r.len() != f || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("rows must be finite and of equal length"));
    }
    let mean: Vec<f64> = (0..f).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, f, |i, j| rows[i][j] - mean[j]);
    let denom = (n.max(2) - 1) as f64;

    // eigen-decompose whichever of X^T X and X X^T is smaller
    let (values, axes) = if f <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x / denom);
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose() / denom);
        let mut v = x.transpose() * eig.eigenvectors;
        for mut col in v.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        (eig.eigenvalues, v)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();

    let mut components = Vec::with_capacity(dims);
    let mut ratios = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut axis: Vec<f64> = axes.column(k).iter().copied().collect();
        let pivot = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(axis);
        ratios.push(if total > 0.0 { values[k].max(0.0) / total } else { 0.0 });
    }
    let coordinates = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|axis| (0..f).map(|j| x[(i, j)] * axis[j]).sum())
                .collect()
        })
        .collect();
    Ok(PcaProjection {
        coordinates,
        explained_variance_ratio: ratios,
        components,
        mean,
    })
}
